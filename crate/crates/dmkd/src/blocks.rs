//! Learnable pieces of the reconstruction pipeline: channel alignment, the
//! convolutional and channel-MLP generative blocks, and the learnable fusion
//! weights.
//!
//! Initialization convention throughout: weights ~ uniform(−1/√fan_in,
//! +1/√fan_in), biases zero, layer-norm affine at identity, fusion weights
//! from the configured initial values.
//!
//! ```
//! use dmkd::blocks::{BlockSet, ConvGenBlock, MlpGenBlock};
//! use dmkd::rng::{stream_rng, Stream};
//!
//! // Width-4 student features aligned up to 8 teacher channels, then two
//! // generative blocks over those 8 channels plus the two fusion weights.
//! let mut rng = stream_rng(7, Stream::BlockInit);
//! let blocks = BlockSet::new(4, 8, 0.5, 0.5, &mut rng);
//! assert_eq!(blocks.params().len(), 14);
//!
//! // The channel MLP spends 4·C² + 5·C parameters at C channels; the conv
//! // block 2·(9·C² + C).
//! assert_eq!(MlpGenBlock::expected_param_count(8), 4 * 64 + 5 * 8);
//! assert_eq!(ConvGenBlock::expected_param_count(8), 2 * (9 * 64 + 8));
//! assert_eq!(blocks.mlp_block.param_count(), 4 * 64 + 5 * 8);
//! ```

use rand::Rng;

use crate::error::{DmkdError, Result};
use crate::tensor::Tensor;

fn init_weight(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::uniform(shape, -bound, bound, rng);
    w.set_requires_grad(true);
    w
}

fn init_zeros(shape: &[usize]) -> Tensor {
    let b = Tensor::zeros(shape);
    b.set_requires_grad(true);
    b
}

fn init_full(shape: &[usize], value: f64) -> Tensor {
    let t = Tensor::full(shape, value);
    t.set_requires_grad(true);
    t
}

/// 1×1 convolution lifting the student's C_s channels to the teacher's C_t.
/// `passthrough` skips the projection entirely when the widths already agree
/// and no learnable alignment is wanted.
pub struct AlignLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub passthrough: bool,
    pub(crate) c_s: usize,
    pub(crate) c_t: usize,
}

impl AlignLayer {
    pub fn new(c_s: usize, c_t: usize, rng: &mut impl Rng) -> AlignLayer {
        AlignLayer {
            weight: init_weight(&[c_t, c_s, 1, 1], c_s, rng),
            bias: init_zeros(&[c_t]),
            passthrough: false,
            c_s,
            c_t,
        }
    }

    /// Identity alignment for equal widths.
    pub fn passthrough(c: usize) -> AlignLayer {
        AlignLayer {
            weight: Tensor::zeros(&[c, c, 1, 1]),
            bias: Tensor::zeros(&[c]),
            passthrough: true,
            c_s: c,
            c_t: c,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.c_t
    }

    pub fn apply(&self, student: &Tensor) -> Result<Tensor> {
        if self.passthrough {
            return Ok(student.clone());
        }
        let shape = student.shape();
        if shape.len() != 3 || shape[0] != self.c_s {
            return Err(DmkdError::ShapeMismatch {
                op: "align".into(),
                details: format!("expected {}xHxW input, got {:?}", self.c_s, shape),
            });
        }
        student.conv2d(&self.weight, &self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        if self.passthrough {
            Vec::new()
        } else {
            vec![self.weight.clone(), self.bias.clone()]
        }
    }
}

/// Two 3×3 same-padding convolutions with a ReLU between; shape-preserving.
pub struct ConvGenBlock {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub(crate) channels: usize,
}

impl ConvGenBlock {
    pub fn new(channels: usize, rng: &mut impl Rng) -> ConvGenBlock {
        let fan_in = channels * 9;
        ConvGenBlock {
            conv1_weight: init_weight(&[channels, channels, 3, 3], fan_in, rng),
            conv1_bias: init_zeros(&[channels]),
            conv2_weight: init_weight(&[channels, channels, 3, 3], fan_in, rng),
            conv2_bias: init_zeros(&[channels]),
            channels,
        }
    }

    pub fn apply(&self, masked: &Tensor) -> Result<Tensor> {
        let h = masked.conv2d(&self.conv1_weight, &self.conv1_bias)?.relu();
        h.conv2d(&self.conv2_weight, &self.conv2_bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.conv1_weight.clone(),
            self.conv1_bias.clone(),
            self.conv2_weight.clone(),
            self.conv2_bias.clone(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Closed form: two C×C×3×3 kernels plus two C biases.
    pub fn expected_param_count(channels: usize) -> usize {
        2 * (channels * channels * 9 + channels)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Per-position channel mixer: C → 2C projection, GELU, 2C → C projection,
/// then layer normalization over channels. Acting on each spatial position
/// independently, it models only inter-channel structure.
pub struct MlpGenBlock {
    pub proj1: Tensor,
    pub proj1_bias: Tensor,
    pub proj2: Tensor,
    pub proj2_bias: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub(crate) channels: usize,
}

impl MlpGenBlock {
    pub fn new(channels: usize, rng: &mut impl Rng) -> MlpGenBlock {
        let hidden = 2 * channels;
        MlpGenBlock {
            proj1: init_weight(&[channels, hidden], channels, rng),
            proj1_bias: init_zeros(&[hidden]),
            proj2: init_weight(&[hidden, channels], hidden, rng),
            proj2_bias: init_zeros(&[channels]),
            ln_gain: init_full(&[channels], 1.0),
            ln_bias: init_zeros(&[channels]),
            channels,
        }
    }

    pub fn apply(&self, masked: &Tensor) -> Result<Tensor> {
        let shape = masked.shape();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(DmkdError::ShapeMismatch {
                op: "gen_mlp".into(),
                details: format!("expected {}xHxW input, got {:?}", self.channels, shape),
            });
        }
        let (h, w) = (shape[1], shape[2]);
        // Rows of the (H·W)×C matrix are the per-position channel vectors.
        let rows = masked.permute(&[1, 2, 0])?.reshape(&[h * w, self.channels])?;
        let hidden = rows.matmul(&self.proj1)?.add(&self.proj1_bias)?.gelu();
        let projected = hidden.matmul(&self.proj2)?.add(&self.proj2_bias)?;
        let normed = projected.layer_norm(&self.ln_gain, &self.ln_bias, 1e-5)?;
        normed.reshape(&[h, w, self.channels])?.permute(&[2, 0, 1])
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.proj1.clone(),
            self.proj1_bias.clone(),
            self.proj2.clone(),
            self.proj2_bias.clone(),
            self.ln_gain.clone(),
            self.ln_bias.clone(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Closed form: C·2C + 2C + 2C·C + C + 2C (projections, biases, affine).
    pub fn expected_param_count(channels: usize) -> usize {
        let c = channels;
        c * 2 * c + 2 * c + 2 * c * c + c + 2 * c
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// The learnable fusion scalars α and β. Both are unconstrained rank-1
/// tensors living in the gradient graph.
pub struct FusionWeights {
    pub alpha: Tensor,
    pub beta: Tensor,
}

impl FusionWeights {
    pub fn new(alpha_init: f64, beta_init: f64) -> FusionWeights {
        FusionWeights { alpha: init_full(&[1], alpha_init), beta: init_full(&[1], beta_init) }
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.alpha.clone(), self.beta.clone()]
    }
}

/// F^rec = α·rec_spatial + β·rec_channel. Shapes must agree exactly; the
/// scalars broadcast.
pub fn fuse(rec_spatial: &Tensor, rec_channel: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    if rec_spatial.shape() != rec_channel.shape() {
        return Err(DmkdError::ShapeMismatch {
            op: "fuse".into(),
            details: format!("{:?} vs {:?}", rec_spatial.shape(), rec_channel.shape()),
        });
    }
    rec_spatial.mul(&w.alpha)?.add(&rec_channel.mul(&w.beta)?)
}

/// All learnable state for one distillation level.
pub struct BlockSet {
    pub align: AlignLayer,
    pub conv_block: ConvGenBlock,
    pub mlp_block: MlpGenBlock,
    pub fusion: FusionWeights,
}

impl BlockSet {
    /// Blocks for a level where the student has `c_s` channels and the
    /// teacher `c_t`. All generative work happens at the teacher width.
    pub fn new(c_s: usize, c_t: usize, alpha_init: f64, beta_init: f64, rng: &mut impl Rng) -> BlockSet {
        BlockSet {
            align: AlignLayer::new(c_s, c_t, rng),
            conv_block: ConvGenBlock::new(c_t, rng),
            mlp_block: MlpGenBlock::new(c_t, rng),
            fusion: FusionWeights::new(alpha_init, beta_init),
        }
    }

    /// All-zero parameters (learnable alignment included); the checkpoint
    /// loader overwrites them in place.
    pub(crate) fn with_zero_params(c_s: usize, c_t: usize) -> BlockSet {
        BlockSet {
            align: AlignLayer {
                weight: init_zeros(&[c_t, c_s, 1, 1]),
                bias: init_zeros(&[c_t]),
                passthrough: false,
                c_s,
                c_t,
            },
            conv_block: ConvGenBlock {
                conv1_weight: init_zeros(&[c_t, c_t, 3, 3]),
                conv1_bias: init_zeros(&[c_t]),
                conv2_weight: init_zeros(&[c_t, c_t, 3, 3]),
                conv2_bias: init_zeros(&[c_t]),
                channels: c_t,
            },
            mlp_block: MlpGenBlock {
                proj1: init_zeros(&[c_t, 2 * c_t]),
                proj1_bias: init_zeros(&[2 * c_t]),
                proj2: init_zeros(&[2 * c_t, c_t]),
                proj2_bias: init_zeros(&[c_t]),
                ln_gain: init_zeros(&[c_t]),
                ln_bias: init_zeros(&[c_t]),
                channels: c_t,
            },
            fusion: FusionWeights::new(0.0, 0.0),
        }
    }

    pub fn student_channels(&self) -> usize {
        self.align.c_s
    }

    pub fn teacher_channels(&self) -> usize {
        self.align.c_t
    }

    /// Stable parameter order: align, conv block, MLP block, fusion.
    pub fn params(&self) -> Vec<Tensor> {
        let mut all = self.align.params();
        all.extend(self.conv_block.params());
        all.extend(self.mlp_block.params());
        all.extend(self.fusion.params());
        all
    }

    /// Parameter names aligned with [`BlockSet::params`], for checkpoints.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut named = Vec::new();
        if !self.align.passthrough {
            named.push(("align.weight".to_string(), self.align.weight.clone()));
            named.push(("align.bias".to_string(), self.align.bias.clone()));
        }
        named.push(("conv_block.conv1.weight".to_string(), self.conv_block.conv1_weight.clone()));
        named.push(("conv_block.conv1.bias".to_string(), self.conv_block.conv1_bias.clone()));
        named.push(("conv_block.conv2.weight".to_string(), self.conv_block.conv2_weight.clone()));
        named.push(("conv_block.conv2.bias".to_string(), self.conv_block.conv2_bias.clone()));
        named.push(("mlp_block.proj1.weight".to_string(), self.mlp_block.proj1.clone()));
        named.push(("mlp_block.proj1.bias".to_string(), self.mlp_block.proj1_bias.clone()));
        named.push(("mlp_block.proj2.weight".to_string(), self.mlp_block.proj2.clone()));
        named.push(("mlp_block.proj2.bias".to_string(), self.mlp_block.proj2_bias.clone()));
        named.push(("mlp_block.ln.gain".to_string(), self.mlp_block.ln_gain.clone()));
        named.push(("mlp_block.ln.bias".to_string(), self.mlp_block.ln_bias.clone()));
        named.push(("fusion.alpha".to_string(), self.fusion.alpha.clone()));
        named.push(("fusion.beta".to_string(), self.fusion.beta.clone()));
        named
    }
}
