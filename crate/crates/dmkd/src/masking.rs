//! Binary masks from attention maps, and their application to the aligned
//! student feature.
//!
//! High-attention entries are the informative ones, so they are the ones
//! *removed*: mask = 0 where attention ≥ τ (ties masked), 1 elsewhere. The
//! generative blocks then have to rebuild exactly the content the teacher
//! considers salient. Masks are constants: gradients flow to the student
//! only through surviving entries.
//!
//! ```
//! use dmkd::attention::attention_pair;
//! use dmkd::masking::{make_masks, mask_ratio};
//! use dmkd::Tensor;
//!
//! // Spatial attention: sigmoid(0) = 0.50 and sigmoid(8) ≈ 0.9997, so at
//! // τ_s = 0.55 the loud position is dropped and the silent one survives.
//! let teacher = Tensor::from_vec(vec![0.0, 2.0], &[1, 1, 2])?;
//! let pair = attention_pair(&teacher, 0.5)?;
//! let masks = make_masks(&pair, 0.55, 0.65)?;
//! assert_eq!(masks.spatial.to_vec(), vec![1.0, 0.0]);
//! assert_eq!(mask_ratio(&masks.spatial)?, 0.5);
//! # Ok::<(), dmkd::DmkdError>(())
//! ```

use crate::attention::AttentionPair;
use crate::error::{DmkdError, Result};
use crate::tensor::Tensor;

/// Binary spatial (1×H×W) and channel (C×1×1) masks with the thresholds
/// that produced them.
pub struct MaskPair {
    pub spatial: Tensor,
    pub channel: Tensor,
    pub tau_s: f64,
    pub tau_c: f64,
}

fn validate_threshold(name: &str, value: f64) -> Result<()> {
    if !(value > 0.0 && value < 1.0) {
        return Err(DmkdError::ThresholdOutOfRange { name: name.to_string(), value });
    }
    Ok(())
}

/// 0 where `attention ≥ tau`, 1 otherwise; a plain constant tensor.
pub fn threshold_mask(attention: &Tensor, tau: f64, name: &str) -> Result<Tensor> {
    validate_threshold(name, tau)?;
    let data = attention
        .data()
        .iter()
        .map(|&a| if a >= tau { 0.0 } else { 1.0 })
        .collect();
    Tensor::from_vec(data, &attention.shape())
}

/// Both masks from an attention pair.
pub fn make_masks(attn: &AttentionPair, tau_s: f64, tau_c: f64) -> Result<MaskPair> {
    Ok(MaskPair {
        spatial: threshold_mask(&attn.spatial, tau_s, "tau_s")?,
        channel: threshold_mask(&attn.channel, tau_c, "tau_c")?,
        tau_s,
        tau_c,
    })
}

/// `(F ⊗ M^s, F ⊗ M^c)`: the spatially masked and channel-masked views of
/// the aligned student feature. The masks broadcast over channels and over
/// spatial positions respectively.
pub fn apply_masks(student_aligned: &Tensor, masks: &MaskPair) -> Result<(Tensor, Tensor)> {
    let f_shape = student_aligned.shape();
    let bad = |details: String| DmkdError::ShapeMismatch { op: "apply_masks".into(), details };
    if f_shape.len() != 3 {
        return Err(bad(format!("feature must be CxHxW, got {:?}", f_shape)));
    }
    let s_shape = masks.spatial.shape();
    if s_shape != [1, f_shape[1], f_shape[2]] {
        return Err(bad(format!("spatial mask {:?} vs feature {:?}", s_shape, f_shape)));
    }
    let c_shape = masks.channel.shape();
    if c_shape != [f_shape[0], 1, 1] {
        return Err(bad(format!("channel mask {:?} vs feature {:?}", c_shape, f_shape)));
    }
    let spatial_masked = student_aligned.mul(&masks.spatial)?;
    let channel_masked = student_aligned.mul(&masks.channel)?;
    Ok((spatial_masked, channel_masked))
}

/// Fraction of zero entries of a strictly binary tensor.
pub fn mask_ratio(mask: &Tensor) -> Result<f64> {
    let data = mask.data();
    let mut zeros = 0usize;
    for (index, &value) in data.iter().enumerate() {
        if value == 0.0 {
            zeros += 1;
        } else if value != 1.0 {
            return Err(DmkdError::NonBinaryInput { op: "mask_ratio".into(), value, index });
        }
    }
    Ok(zeros as f64 / data.len() as f64)
}
