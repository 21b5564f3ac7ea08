//! The desk-scale CNN used for both teacher and student: two bias-free 3×3
//! same-padding convolutions, each followed by ReLU, then a global-average-
//! pool linear head over three classes. The teacher is the width-8 instance,
//! the student width 4. The distillation level taps the post-stack feature
//! map, which keeps the input's 16×16 extent.
//!
//! The convolutions carry no bias on purpose: a near-zero input region then
//! produces a near-zero feature response, so the tap's energy landscape
//! follows the input's sparsity instead of floating on a learned offset.
//! The attention maps that drive masking are energy statistics of this tap,
//! and they are only selective when quiet regions actually stay quiet.

use rand::Rng;

use crate::data::N_CLASSES;
use crate::error::Result;
use crate::tensor::Tensor;

pub const TEACHER_WIDTH: usize = 8;
pub const STUDENT_WIDTH: usize = 4;

pub struct ToyModel {
    pub conv1_weight: Tensor,
    pub conv2_weight: Tensor,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    /// Shared all-zero bias for both convolutions; never trained.
    zero_bias: Tensor,
    width: usize,
}

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

impl ToyModel {
    pub fn new(width: usize, rng: &mut impl Rng) -> ToyModel {
        ToyModel {
            conv1_weight: init_weight(&[width, 1, 3, 3], 9, rng),
            conv2_weight: init_weight(&[width, width, 3, 3], width * 9, rng),
            fc_weight: init_weight(&[width, N_CLASSES], width, rng),
            fc_bias: init_zeros(&[N_CLASSES]),
            zero_bias: Tensor::zeros(&[width]),
            width,
        }
    }

    /// All-zero parameters; the checkpoint loader overwrites them in place.
    pub(crate) fn with_zero_params(width: usize) -> ToyModel {
        ToyModel {
            conv1_weight: init_zeros(&[width, 1, 3, 3]),
            conv2_weight: init_zeros(&[width, width, 3, 3]),
            fc_weight: init_zeros(&[width, N_CLASSES]),
            fc_bias: init_zeros(&[N_CLASSES]),
            zero_bias: Tensor::zeros(&[width]),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Forward pass on one 1×16×16 image: the post-stack feature map (the
    /// distillation tap) and the class logits.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = image.conv2d(&self.conv1_weight, &self.zero_bias)?.relu();
        let feature = h.conv2d(&self.conv2_weight, &self.zero_bias)?.relu();
        let logits = self.head(&feature)?;
        Ok((feature, logits))
    }

    /// Global average pool over the spatial extent, then the linear head.
    pub fn head(&self, feature: &Tensor) -> Result<Tensor> {
        let pooled = feature.reduce_mean(&[1, 2])?.reshape(&[1, self.width])?;
        pooled.matmul(&self.fc_weight)?.reshape(&[N_CLASSES])?.add(&self.fc_bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.conv1_weight.clone(),
            self.conv2_weight.clone(),
            self.fc_weight.clone(),
            self.fc_bias.clone(),
        ]
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        ["conv1.weight", "conv2.weight", "fc.weight", "fc.bias"]
            .iter()
            .map(|n| n.to_string())
            .zip(self.params())
            .collect()
    }

    /// Drop every parameter out of the gradient graph. Frozen-model forward
    /// passes record nothing, so a teacher adds no autodiff overhead.
    pub fn freeze(&self) {
        for p in self.params() {
            p.set_requires_grad(false);
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::data::generate_dataset;
    use crate::rng::{stream_rng, Stream};
    use super::*;

    fn sample_image() -> Tensor {
        generate_dataset(17, 3, 3).unwrap().image(1)
    }

    #[test]
    fn forward_shapes_and_feature_extent() {
        let mut rng = stream_rng(30, Stream::TeacherInit);
        let model = ToyModel::new(TEACHER_WIDTH, &mut rng);
        let (feature, logits) = model.forward(&sample_image()).unwrap();
        assert_eq!(feature.shape(), vec![TEACHER_WIDTH, 16, 16]);
        assert_eq!(logits.shape(), vec![N_CLASSES]);

        let mut rng = stream_rng(30, Stream::StudentInit);
        let student = ToyModel::new(STUDENT_WIDTH, &mut rng);
        let (feature, _) = student.forward(&sample_image()).unwrap();
        // Teacher and student taps share the 16×16 spatial extent.
        assert_eq!(feature.shape(), vec![STUDENT_WIDTH, 16, 16]);
    }

    #[test]
    fn feature_tap_is_non_negative() {
        let mut rng = stream_rng(31, Stream::TeacherInit);
        let model = ToyModel::new(4, &mut rng);
        let (feature, _) = model.forward(&sample_image()).unwrap();
        assert!(feature.to_vec().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn same_stream_gives_identical_models() {
        let a = ToyModel::new(4, &mut stream_rng(32, Stream::StudentInit));
        let b = ToyModel::new(4, &mut stream_rng(32, Stream::StudentInit));
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.to_vec(), pb.to_vec());
        }
    }

    #[test]
    fn forward_matches_manual_composition() {
        let mut rng = stream_rng(33, Stream::TeacherInit);
        let model = ToyModel::new(4, &mut rng);
        let image = sample_image();
        let (feature, logits) = model.forward(&image).unwrap();

        let zero_bias = Tensor::zeros(&[4]);
        let want_feature = image
            .conv2d(&model.conv1_weight, &zero_bias)
            .unwrap()
            .relu()
            .conv2d(&model.conv2_weight, &zero_bias)
            .unwrap()
            .relu();
        assert_eq!(feature.to_vec(), want_feature.to_vec());

        let pooled: Vec<f64> = (0..4)
            .map(|c| want_feature.to_vec()[c * 256..(c + 1) * 256].iter().sum::<f64>() / 256.0)
            .collect();
        let fc = model.fc_weight.to_vec();
        let fb = model.fc_bias.to_vec();
        for k in 0..N_CLASSES {
            let want: f64 = (0..4).map(|c| pooled[c] * fc[c * N_CLASSES + k]).sum::<f64>() + fb[k];
            assert!((logits.to_vec()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn head_is_invariant_to_spatial_shuffling() {
        // Global average pooling forgets positions, so permuting the feature
        // map spatially moves nothing but summation order.
        let mut rng = stream_rng(34, Stream::TeacherInit);
        let model = ToyModel::new(4, &mut rng);
        let feature = Tensor::uniform(&[4, 5, 7], 0.0, 1.0, &mut rng);
        let transposed = feature.permute(&[0, 2, 1]).unwrap();
        let a = model.head(&feature).unwrap().to_vec();
        let b = model.head(&transposed).unwrap().to_vec();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_model_records_no_graph() {
        let mut rng = stream_rng(35, Stream::TeacherInit);
        let model = ToyModel::new(4, &mut rng);
        model.freeze();
        let (feature, logits) = model.forward(&sample_image()).unwrap();
        assert!(!feature.requires_grad());
        assert!(!logits.requires_grad());
        assert!(feature.op_name().is_none());
        let loss = logits.cross_entropy(0).unwrap();
        // Backward on a graph-free loss is a no-op rather than an error.
        loss.backward().unwrap();
        assert!(model.conv1_weight.grad().is_none());
    }

    #[test]
    fn gradients_flow_to_every_parameter_when_trainable() {
        let mut rng = stream_rng(36, Stream::StudentInit);
        let model = ToyModel::new(4, &mut rng);
        let (_, logits) = model.forward(&sample_image()).unwrap();
        logits.cross_entropy(2).unwrap().backward().unwrap();
        for (name, p) in model.named_params() {
            assert!(p.grad().is_some(), "no gradient for {name}");
        }
    }
}
