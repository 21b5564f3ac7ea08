//! Synthetic three-class image task: blobs, horizontal bars, and crosses on
//! 16×16 canvases, with jittered geometry and additive Gaussian noise.
//!
//! The generator is fully deterministic per seed: labels follow a fixed
//! round-robin (so class counts are balanced within ±1 for any size) and all
//! randomness comes from one dedicated stream.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DmkdError, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 16;
pub const N_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["blob", "horizontal-bar", "cross"];
const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
const NOISE_SIGMA: f64 = 0.08;

/// All images of one task instance, train split first, then test split.
pub struct SyntheticDataset {
    /// `[n_train + n_test, 1, 16, 16]`, values in `[0, 1]`.
    pub images: Tensor,
    /// One class index in `{0, 1, 2}` per image.
    pub labels: Vec<usize>,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The `i`-th image as its own 1×16×16 tensor.
    pub fn image(&self, index: usize) -> Tensor {
        let data = self.images.data()[index * PIXELS..(index + 1) * PIXELS].to_vec();
        Tensor::from_vec(data, &[1, IMAGE_SIDE, IMAGE_SIDE])
            .expect("slice length matches the image shape")
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.n_train
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.n_train..self.n_train + self.n_test
    }

    pub fn to_file(&self, path: &std::path::Path) -> Result<()> {
        let file = DatasetFile {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            n_train: self.n_train,
            n_test: self.n_test,
            image_shape: self.images.shape(),
            image_data: self.images.to_vec(),
            labels: self.labels.clone(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn from_file(path: &std::path::Path) -> Result<SyntheticDataset> {
        let text = std::fs::read_to_string(path)?;
        let file: DatasetFile = serde_json::from_str(&text)
            .map_err(|e| DmkdError::CheckpointInvalid(format!("dataset file: {e}")))?;
        let bad = |msg: String| Err(DmkdError::CheckpointInvalid(format!("dataset file: {msg}")));
        if file.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", file.schema_version));
        }
        let n = file.n_train + file.n_test;
        if file.image_shape != [n, 1, IMAGE_SIDE, IMAGE_SIDE] {
            return bad(format!("image shape {:?} does not match splits {}/{}", file.image_shape, file.n_train, file.n_test));
        }
        if file.labels.len() != n {
            return bad(format!("{} labels for {} images", file.labels.len(), n));
        }
        if let Some(&l) = file.labels.iter().find(|&&l| l >= N_CLASSES) {
            return bad(format!("label {l} out of range"));
        }
        if file.image_data.len() != n * PIXELS {
            return bad(format!("{} pixel values for {} images", file.image_data.len(), n));
        }
        if file.image_data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("pixel values outside [0, 1]".to_string());
        }
        Ok(SyntheticDataset {
            images: Tensor::from_vec(file.image_data, &file.image_shape)?,
            labels: file.labels,
            seed: file.seed,
            n_train: file.n_train,
            n_test: file.n_test,
        })
    }
}

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u32,
    seed: u64,
    n_train: usize,
    n_test: usize,
    image_shape: Vec<usize>,
    image_data: Vec<f64>,
    labels: Vec<usize>,
}

/// Deterministically synthesize `n_train + n_test` images. Labels cycle
/// through the classes in index order, keeping counts balanced within ±1 on
/// the whole set and within each split.
pub fn generate_dataset(seed: u64, n_train: usize, n_test: usize) -> Result<SyntheticDataset> {
    if n_train == 0 || n_test == 0 {
        return Err(DmkdError::ConfigInvalid(format!(
            "split sizes must be positive, got {n_train}/{n_test}"
        )));
    }
    let n = n_train + n_test;
    let mut rng = stream_rng(seed, Stream::DataSynthesis);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("fixed sigma is valid");
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for index in 0..n {
        let label = index % N_CLASSES;
        labels.push(label);
        let mut pixels = [0.0f64; PIXELS];
        draw_shape(label, &mut pixels, &mut rng);
        for p in pixels.iter_mut() {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        data.extend_from_slice(&pixels);
    }
    Ok(SyntheticDataset {
        images: Tensor::from_vec(data, &[n, 1, IMAGE_SIDE, IMAGE_SIDE])?,
        labels,
        seed,
        n_train,
        n_test,
    })
}

fn put(pixels: &mut [f64; PIXELS], y: usize, x: usize, value: f64) {
    pixels[y * IMAGE_SIDE + x] = value;
}

/// Paint the class shape at a jittered position with a jittered intensity.
fn draw_shape(label: usize, pixels: &mut [f64; PIXELS], rng: &mut impl Rng) {
    let amplitude = rng.random_range(0.40..0.65);
    match label {
        // Filled disk.
        0 => {
            let radius = rng.random_range(2..=3usize);
            let cy = rng.random_range(radius..=15 - radius) as i64;
            let cx = rng.random_range(radius..=15 - radius) as i64;
            let r = radius as i64;
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let (dy, dx) = (y as i64 - cy, x as i64 - cx);
                    if dy * dy + dx * dx <= r * r {
                        put(pixels, y, x, amplitude);
                    }
                }
            }
        }
        // Horizontal bar of jittered thickness and length.
        1 => {
            let thickness = rng.random_range(1..=2usize);
            let length = rng.random_range(10..=IMAGE_SIDE);
            let y0 = rng.random_range(1..=IMAGE_SIDE - 1 - thickness);
            let x0 = rng.random_range(0..=IMAGE_SIDE - length);
            for y in y0..y0 + thickness {
                for x in x0..x0 + length {
                    put(pixels, y, x, amplitude);
                }
            }
        }
        // Upright cross: 9-pixel horizontal and vertical strokes.
        _ => {
            let arm = 4usize;
            let cy = rng.random_range(arm..=15 - arm);
            let cx = rng.random_range(arm..=15 - arm);
            for d in 0..=2 * arm {
                put(pixels, cy, cx - arm + d, amplitude);
                put(pixels, cy - arm + d, cx, amplitude);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_dataset(11, 30, 12).unwrap();
        let b = generate_dataset(11, 30, 12).unwrap();
        assert_eq!(a.images.to_vec(), b.images.to_vec());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_dataset(11, 30, 12).unwrap();
        let b = generate_dataset(12, 30, 12).unwrap();
        assert_ne!(a.images.to_vec(), b.images.to_vec());
    }

    #[test]
    fn histogram_of_300_samples_is_exactly_balanced() {
        let ds = generate_dataset(5, 200, 100).unwrap();
        let mut counts = [0usize; N_CLASSES];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
    }

    #[test]
    fn class_counts_balanced_within_one_for_any_size() {
        for (n_train, n_test) in [(7, 5), (10, 3), (32, 16), (20, 1)] {
            let ds = generate_dataset(3, n_train, n_test).unwrap();
            for indices in [ds.train_indices(), ds.test_indices()] {
                let mut counts = [0usize; N_CLASSES];
                for i in indices {
                    counts[ds.label(i)] += 1;
                }
                let max = counts.iter().max().unwrap();
                let min = counts.iter().min().unwrap();
                assert!(max - min <= 1, "{n_train}/{n_test}: {counts:?}");
            }
        }
    }

    #[test]
    fn pixels_stay_inside_unit_range() {
        let ds = generate_dataset(9, 60, 30).unwrap();
        assert!(ds.images.to_vec().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn image_extraction_matches_the_backing_tensor() {
        let ds = generate_dataset(2, 6, 3).unwrap();
        let img = ds.image(4);
        assert_eq!(img.shape(), vec![1, IMAGE_SIDE, IMAGE_SIDE]);
        let all = ds.images.to_vec();
        assert_eq!(img.to_vec(), all[4 * PIXELS..5 * PIXELS].to_vec());
    }

    #[test]
    fn shapes_are_visibly_different_across_classes() {
        // Noise-free sanity on the painted pixel counts: disks cover 13–29
        // pixels, bars 10–32, crosses exactly 17.
        let mut rng = stream_rng(4, Stream::DataSynthesis);
        for (label, min_on, max_on) in [(0, 10, 40), (1, 9, 33), (2, 16, 18)] {
            let mut px = [0.0; PIXELS];
            draw_shape(label, &mut px, &mut rng);
            let on = px.iter().filter(|&&p| p > 0.0).count();
            assert!((min_on..=max_on).contains(&on), "class {label}: {on} bright pixels");
        }
    }

    #[test]
    fn file_round_trip_is_bitwise_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let ds = generate_dataset(21, 9, 6).unwrap();
        ds.to_file(&path).unwrap();
        let bytes_first = std::fs::read(&path).unwrap();

        let loaded = SyntheticDataset::from_file(&path).unwrap();
        assert_eq!(loaded.images.to_vec(), ds.images.to_vec());
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.seed, ds.seed);

        loaded.to_file(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes_first);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let ds = generate_dataset(21, 3, 3).unwrap();

        // Label out of range.
        let mut bad = ds.labels.clone();
        bad[0] = 9;
        let broken = SyntheticDataset { labels: bad, ..dataset_copy(&ds) };
        broken.to_file(&path).unwrap();
        assert!(matches!(
            SyntheticDataset::from_file(&path),
            Err(DmkdError::CheckpointInvalid(_))
        ));

        // Truncated JSON.
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(
            SyntheticDataset::from_file(&path),
            Err(DmkdError::CheckpointInvalid(_))
        ));
    }

    fn dataset_copy(ds: &SyntheticDataset) -> SyntheticDataset {
        SyntheticDataset {
            images: Tensor::from_vec(ds.images.to_vec(), &ds.images.shape()).unwrap(),
            labels: ds.labels.clone(),
            seed: ds.seed,
            n_train: ds.n_train,
            n_test: ds.n_test,
        }
    }

    #[test]
    fn empty_splits_are_rejected() {
        assert!(matches!(generate_dataset(1, 0, 5), Err(DmkdError::ConfigInvalid(_))));
        assert!(matches!(generate_dataset(1, 5, 0), Err(DmkdError::ConfigInvalid(_))));
    }
}
