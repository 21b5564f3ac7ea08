//! Spatial and channel attention maps computed from the teacher feature.
//!
//! Both maps summarize a C×H×W teacher feature map into saliency scores
//! squashed through a temperature-scaled sigmoid:
//!
//! - spatial: per position, the squared L2 norm of the length-C channel
//!   vector, scaled by 1/(C·T) — a 1×H×W map;
//! - channel: per channel, the mean over all H·W positions, scaled by 1/T —
//!   a C×1×1 map.
//!
//! The teacher is a fixed template during distillation, so both maps are
//! computed on a detached copy of the input and never carry gradients.
//!
//! ```
//! use dmkd::attention::attention_pair;
//! use dmkd::Tensor;
//!
//! // One channel, two positions: a silent one and a loud one.
//! let teacher = Tensor::from_vec(vec![0.0, 2.0], &[1, 1, 2])?;
//! let pair = attention_pair(&teacher, 0.5)?;
//! assert_eq!(pair.spatial.shape(), vec![1, 1, 2]);
//! assert_eq!(pair.channel.shape(), vec![1, 1, 1]);
//!
//! let s = pair.spatial.to_vec();
//! assert_eq!(s[0], 0.5);          // sigmoid(0): nothing to attend to
//! assert!(s[1] > 0.99);           // sigmoid(2² / (1 · 0.5)) = sigmoid(8)
//! # Ok::<(), dmkd::DmkdError>(())
//! ```

use crate::error::{DmkdError, Result};
use crate::tensor::Tensor;

/// The two attention maps of one feature level, with the temperature that
/// produced them. Values are sigmoid outputs, strictly inside (0, 1) for any
/// finite input that does not saturate f64.
pub struct AttentionPair {
    /// 1×H×W spatial saliency.
    pub spatial: Tensor,
    /// C×1×1 channel saliency.
    pub channel: Tensor,
    pub temperature: f64,
}

fn validate(teacher: &Tensor, temperature: f64, op: &str) -> Result<Vec<usize>> {
    if temperature <= 0.0 {
        return Err(DmkdError::NonPositiveTemperature { value: temperature });
    }
    let shape = teacher.shape();
    if shape.len() != 3 {
        return Err(DmkdError::ShapeMismatch {
            op: op.to_string(),
            details: format!("expects a CxHxW feature, got {:?}", shape),
        });
    }
    Ok(shape)
}

/// Per-position saliency sigmoid(‖F_n‖² / (C·T)) reshaped to 1×H×W. The
/// squared norm makes the map invariant to sign flips of the feature.
pub fn spatial_attention(teacher: &Tensor, temperature: f64) -> Result<Tensor> {
    let shape = validate(teacher, temperature, "spatial_attention")?;
    let c = shape[0];
    let t = teacher.detach();
    let sq = t.mul(&t)?;
    let norms = sq.reduce_sum(&[0])?;
    Ok(norms.scale(1.0 / (c as f64 * temperature)).sigmoid())
}

/// Per-channel saliency sigmoid(mean_{h,w} F_{k,h,w} / T), shaped C×1×1. The
/// raw (signed) mean is used; strongly negative channels attenuate toward 0.
pub fn channel_attention(teacher: &Tensor, temperature: f64) -> Result<Tensor> {
    validate(teacher, temperature, "channel_attention")?;
    let t = teacher.detach();
    let means = t.reduce_mean(&[1, 2])?;
    Ok(means.scale(1.0 / temperature).sigmoid())
}

/// Both maps from one teacher feature.
pub fn attention_pair(teacher: &Tensor, temperature: f64) -> Result<AttentionPair> {
    Ok(AttentionPair {
        spatial: spatial_attention(teacher, temperature)?,
        channel: channel_attention(teacher, temperature)?,
        temperature,
    })
}

#[cfg(test)]
mod tests {
    use crate::rng::{stream_rng, Stream};
    use super::*;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random_feature(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Gradcheck);
        Tensor::uniform(shape, -1.5, 1.5, &mut rng)
    }

    #[test]
    fn constant_feature_collapses_algebraically() {
        // C·c²/(C·T) = c²/T regardless of C, and the channel mean of a
        // constant is the constant.
        let c = 0.8;
        let t = 0.5;
        let f = Tensor::full(&[3, 2, 2], c);
        let s = spatial_attention(&f, t).unwrap();
        assert_eq!(s.shape(), vec![1, 2, 2]);
        for v in s.to_vec() {
            assert!((v - sigmoid(c * c / t)).abs() < 1e-12);
        }
        let ch = channel_attention(&f, t).unwrap();
        assert_eq!(ch.shape(), vec![3, 1, 1]);
        for v in ch.to_vec() {
            assert!((v - sigmoid(c / t)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_feature_gives_half_everywhere() {
        let f = Tensor::zeros(&[4, 3, 3]);
        assert!(spatial_attention(&f, 0.5).unwrap().to_vec().iter().all(|v| *v == 0.5));
        assert!(channel_attention(&f, 0.5).unwrap().to_vec().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn spatial_matches_scalar_loop_oracle() {
        let f = random_feature(&[3, 2, 2], 41);
        let data = f.to_vec();
        let temp = 0.5;
        let got = spatial_attention(&f, temp).unwrap().to_vec();
        // Oracle: accumulate the per-position squared norm one scalar at a time.
        for h in 0..2 {
            for w in 0..2 {
                let mut norm_sq = 0.0;
                for c in 0..3 {
                    let v = data[c * 4 + h * 2 + w];
                    norm_sq += v * v;
                }
                let want = sigmoid(norm_sq / (3.0 * temp));
                assert!((got[h * 2 + w] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_matches_scalar_loop_oracle() {
        let f = random_feature(&[3, 2, 2], 42);
        let data = f.to_vec();
        let temp = 0.5;
        let got = channel_attention(&f, temp).unwrap().to_vec();
        for c in 0..3 {
            let mut total = 0.0;
            for h in 0..2 {
                for w in 0..2 {
                    total += data[c * 4 + h * 2 + w];
                }
            }
            let want = sigmoid(total / (4.0 * temp));
            assert!((got[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_positive_temperature_and_bad_rank() {
        let f = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(
            spatial_attention(&f, 0.0),
            Err(DmkdError::NonPositiveTemperature { .. })
        ));
        assert!(matches!(
            channel_attention(&f, -1.0),
            Err(DmkdError::NonPositiveTemperature { .. })
        ));
        let flat = Tensor::zeros(&[4, 4]);
        assert!(spatial_attention(&flat, 0.5).is_err());
    }

    #[test]
    fn outputs_stay_strictly_inside_unit_interval() {
        for seed in 0..5 {
            let f = random_feature(&[4, 3, 3], 100 + seed);
            for v in spatial_attention(&f, 0.5).unwrap().to_vec() {
                assert!(v > 0.0 && v < 1.0);
            }
            for v in channel_attention(&f, 0.5).unwrap().to_vec() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn huge_temperature_flattens_both_maps_to_half() {
        let f = random_feature(&[4, 3, 3], 43);
        for v in spatial_attention(&f, 1e9).unwrap().to_vec() {
            assert!((v - 0.5).abs() < 1e-6);
        }
        for v in channel_attention(&f, 1e9).unwrap().to_vec() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        let f = random_feature(&[3, 2, 2], 44);
        let perm = [2usize, 0, 1];
        let mut permuted = vec![0.0; f.numel()];
        let data = f.to_vec();
        for (to, &from) in perm.iter().enumerate() {
            permuted[to * 4..(to + 1) * 4].copy_from_slice(&data[from * 4..(from + 1) * 4]);
        }
        let fp = Tensor::from_vec(permuted, &[3, 2, 2]).unwrap();

        // Channel attention permutes with the channels.
        let base = channel_attention(&f, 0.5).unwrap().to_vec();
        let got = channel_attention(&fp, 0.5).unwrap().to_vec();
        for (to, &from) in perm.iter().enumerate() {
            assert_eq!(got[to], base[from]);
        }
        // Spatial attention ignores channel order entirely.
        assert_eq!(
            spatial_attention(&f, 0.5).unwrap().to_vec(),
            spatial_attention(&fp, 0.5).unwrap().to_vec()
        );
    }

    #[test]
    fn spatial_permutation_equivariance() {
        // Transposing H and W is a spatial permutation.
        let f = random_feature(&[3, 2, 4], 45);
        let ft = f.permute(&[0, 2, 1]).unwrap();

        let base = spatial_attention(&f, 0.5).unwrap();
        let got = spatial_attention(&ft, 0.5).unwrap();
        assert_eq!(
            got.to_vec(),
            base.permute(&[0, 2, 1]).unwrap().to_vec()
        );
        // Channel attention ignores spatial order entirely.
        assert_eq!(
            channel_attention(&f, 0.5).unwrap().to_vec(),
            channel_attention(&ft, 0.5).unwrap().to_vec()
        );
    }

    #[test]
    fn sign_flip_preserves_spatial_but_not_channel() {
        let f = random_feature(&[3, 2, 2], 46);
        let neg = f.scale(-1.0);
        assert_eq!(
            spatial_attention(&f, 0.5).unwrap().to_vec(),
            spatial_attention(&neg, 0.5).unwrap().to_vec()
        );
        assert_ne!(
            channel_attention(&f, 0.5).unwrap().to_vec(),
            channel_attention(&neg, 0.5).unwrap().to_vec()
        );
    }

    #[test]
    fn attention_never_joins_the_gradient_graph() {
        let f = random_feature(&[2, 2, 2], 47);
        f.set_requires_grad(true);
        let pair = attention_pair(&f, 0.5).unwrap();
        assert!(!pair.spatial.requires_grad());
        assert!(!pair.channel.requires_grad());
    }
}
