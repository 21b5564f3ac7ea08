//! Dual masked knowledge distillation at desk scale.
//!
//! This crate trains a small student CNN to mimic a frozen teacher by
//! reconstructing the teacher's feature map from a doubly masked view of the
//! student's: attention maps computed from the teacher decide which spatial
//! positions and channels get zeroed, generative blocks rebuild the missing
//! content, and two learnable weights fuse the reconstructions. Everything
//! runs on an in-crate f64 tensor type with tape-based reverse-mode
//! differentiation, so every gradient can be (and is) checked against finite
//! differences.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: dense tensors, autodiff, SGD.
//! - [`attention`]: spatial and channel attention maps from teacher features.
//! - [`masking`]: attention-thresholded binary masks and their application.
//! - [`blocks`]: channel alignment, the two generative blocks, weighted fusion.
//! - [`distill`]: the reconstruction loss in all its masking variants.
//! - [`data`] / [`model`]: the synthetic shape task and the toy CNNs.
//! - [`train`]: seeded SGD loops for teachers, students, and distillation.
//! - [`ablate`]: grids over variants and thresholds, rendered as CSV.
//! - [`checkpoint`] / [`report`]: JSON round-trips for params and run logs.
//! - [`rng`] / [`error`]: seed-stream plumbing and the error type.
//! - [`gradcheck`]: finite-difference verification used by tests and the CLI.
//!
//! A quick taste of the autodiff core:
//!
//! ```
//! use dmkd::Tensor;
//!
//! let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3])?;
//! x.set_requires_grad(true);
//! let loss = x.mul(&x)?.sum_all();   // Σ x²
//! loss.backward()?;
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! # Ok::<(), dmkd::DmkdError>(())
//! ```

pub mod ablate;
pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{DmkdError, Result};
pub use tensor::Tensor;
