//! Dataset ingestion (IDX, CIFAR-10 binary), synthetic Gaussian blobs and
//! seeded mini-batching.
//!
//! Pixel values are scaled to `[0, 1]` at load time, so perturbation radii are
//! always expressed in raw pixel units.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];

/// Immutable labelled samples sharing one input shape, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub n_classes: usize,
    sample_shape: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        n_classes: usize,
        sample_shape: Vec<usize>,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let dim: usize = sample_shape.iter().product();
        if inputs.len() != dim * labels.len() {
            return Err(Error::Consistency(format!(
                "{} input values for {} samples of shape {:?}",
                inputs.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} not below n_classes = {n_classes}"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            n_classes,
            sample_shape,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.sample_dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn input_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape.clone(), self.input(i).to_vec())
            .expect("sample shape matches stored dimension")
    }

    /// Stacks the given samples into a `[B, ...sample_shape]` tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(shape, data).expect("gathered shape is consistent"),
            labels,
        )
    }

    /// Keeps only samples whose label passes `keep`, relabelling through `map`.
    pub fn filter_map_labels(
        &self,
        name: impl Into<String>,
        n_classes: usize,
        map: impl Fn(usize) -> Option<usize>,
    ) -> Result<Dataset> {
        let d = self.sample_dim();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if let Some(l) = map(self.labels[i]) {
                inputs.extend_from_slice(self.input(i));
                labels.push(l);
            }
        }
        debug_assert_eq!(inputs.len(), labels.len() * d);
        Dataset::new(name, n_classes, self.sample_shape.clone(), inputs, labels)
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

fn truncated(msg: String) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, msg))
}

/// Decodes an IDX image file (`[N, rows, cols]` unsigned bytes) and its label
/// file. Images become `[1, rows, cols]` samples scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images file has magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let magic = read_be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels file has magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_images = read_be_u32(images, 4, "images")? as usize;
    let rows = read_be_u32(images, 8, "images")? as usize;
    let cols = read_be_u32(images, 12, "images")? as usize;
    let n_labels = read_be_u32(labels, 4, "labels")? as usize;
    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "images file holds {n_images} items but labels file holds {n_labels}"
        )));
    }
    let pixels = n_images * rows * cols;
    let image_body = images
        .get(16..16 + pixels)
        .ok_or_else(|| truncated(format!("images: need {pixels} pixel bytes, file has {}", images.len().saturating_sub(16))))?;
    let label_body = labels
        .get(8..8 + n_labels)
        .ok_or_else(|| truncated(format!("labels: need {n_labels} label bytes, file has {}", labels.len().saturating_sub(8))))?;

    let labels: Vec<usize> = label_body.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let inputs = image_body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new("idx", n_classes, vec![1, rows, cols], inputs, labels)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    let mut ds = parse_idx(&images, &labels)?;
    ds.name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    Ok(ds)
}

/// Encodes a dataset as an IDX pair. Values are quantised to bytes
/// (`round(v * 255)`), so only byte-aligned datasets round-trip exactly.
/// Samples must have shape `[1, rows, cols]`, `[rows, cols]` or `[dim]`
/// (written as one row).
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match ds.sample_shape() {
        &[1, r, c] | &[r, c] => (r, c),
        &[d] => (1, d),
        s => {
            return Err(Error::shape(format!(
                "IDX images need single-channel samples, got {s:?}"
            )))
        }
    };
    if ds.n_classes > 256 {
        return Err(Error::invalid("IDX labels are single bytes"));
    }
    let n = u32::try_from(ds.len()).map_err(|_| Error::invalid("too many samples for IDX"))?;
    let mut images = Vec::with_capacity(16 + ds.inputs.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(ds.inputs.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));

    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Decodes concatenated CIFAR-10 records (1 label byte + 3072 channel-major pixels).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 batch of {} bytes is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut inputs = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {i}: label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new("cifar10", 10, CIFAR_SHAPE.to_vec(), inputs, labels)
}

/// Loads CIFAR-10 binary batches. `path` may be a single batch file or a
/// directory; for a directory the `data_batch_*.bin` files are read in name
/// order, falling back to every `*.bin` file when none exist.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut bins: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        bins.sort();
        let train: Vec<PathBuf> = bins
            .iter()
            .filter(|p| {
                p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("data_batch_"))
            })
            .cloned()
            .collect();
        if train.is_empty() {
            bins
        } else {
            train
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(fs::read(f)?);
    }
    // Validate each file separately so a bad length is attributed correctly.
    for f in &files {
        let len = fs::metadata(f)?.len() as usize;
        if len % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format(format!(
                "{}: {len} bytes is not a multiple of {CIFAR_RECORD_LEN}",
                f.display()
            )));
        }
    }
    parse_cifar10(&bytes)
}

/// Parameters of an isotropic Gaussian blob dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub class_centers: Vec<Vec<f64>>,
    pub noise_stddev: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 {
            return Err(Error::schema("n_classes", "must be at least 1"));
        }
        if self.class_centers.len() != self.n_classes {
            return Err(Error::schema(
                "class_centers",
                format!("{} centers for {} classes", self.class_centers.len(), self.n_classes),
            ));
        }
        for (i, c) in self.class_centers.iter().enumerate() {
            if c.len() != self.input_dim {
                return Err(Error::schema(
                    format!("class_centers[{i}]"),
                    format!("length {} but input_dim is {}", c.len(), self.input_dim),
                ));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(format!("class_centers[{i}]"), "non-finite coordinate"));
            }
            if let Some(j) = self.class_centers[..i].iter().position(|o| o == c) {
                return Err(Error::schema(
                    format!("class_centers[{i}]"),
                    format!("duplicates class_centers[{j}]"),
                ));
            }
        }
        if !(self.noise_stddev > 0.0 && self.noise_stddev.is_finite()) {
            return Err(Error::schema("noise_stddev", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Draws `samples_per_class` points per class around each center, clipped to
/// `[0, 1]`. Samples are ordered class-major and have shape `[input_dim]`.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_stddev)
        .map_err(|e| Error::schema("noise_stddev", e.to_string()))?;
    let total = spec.n_classes * spec.samples_per_class;
    let mut inputs = Vec::with_capacity(total * spec.input_dim);
    let mut labels = Vec::with_capacity(total);
    for (class, center) in spec.class_centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            inputs.extend(
                center
                    .iter()
                    .map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0)),
            );
            labels.push(class);
        }
    }
    Dataset::new("blobs", spec.n_classes, vec![spec.input_dim], inputs, labels)
}

/// Seeded per-epoch permutation of `0..n` cut into batches; the last batch
/// may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch_index: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch_index);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One mini-batch: stacked inputs and their labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch_index: u64) -> Vec<Batch> {
    batch_indices(ds.len(), batch_size, seed, epoch_index)
        .into_iter()
        .map(|idx| {
            let (inputs, labels) = ds.gather(&idx);
            Batch { inputs, labels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_idx_pair() -> (Vec<u8>, Vec<u8>) {
        // Label file: magic, count = 1, then the label 7.
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
        let images = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 51, 204, 255];
        (images, labels)
    }

    #[test]
    fn parses_hand_assembled_idx() {
        let (images, labels) = hand_idx_pair();
        let ds = parse_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 7);
        assert_eq!(ds.sample_shape(), &[1, 2, 2]);
        assert_eq!(ds.input(0), &[0.0, 0.2, 0.8, 1.0]);
    }

    #[test]
    fn idx_wrong_magic_is_format_error() {
        let (mut images, labels) = hand_idx_pair();
        images[3] = 1;
        assert!(matches!(parse_idx(&images, &labels), Err(Error::Format(_))));
    }

    #[test]
    fn idx_count_mismatch_is_consistency_error() {
        let (mut images, labels) = hand_idx_pair();
        images[7] = 2;
        images.extend_from_slice(&[1, 2, 3, 4]);
        assert!(matches!(parse_idx(&images, &labels), Err(Error::Consistency(_))));
    }

    #[test]
    fn idx_truncated_is_io_error() {
        let (images, labels) = hand_idx_pair();
        assert!(matches!(parse_idx(&images[..18], &labels), Err(Error::Io(_))));
        assert!(matches!(parse_idx(&images[..10], &labels), Err(Error::Io(_))));
        assert!(matches!(parse_idx(&images, &labels[..8]), Err(Error::Io(_))));
    }

    #[test]
    fn cifar_single_record() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        let ds = parse_cifar10(&rec).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 3);
        assert_eq!(ds.sample_shape(), &[3, 32, 32]);
        assert!(ds.input(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar_empty_and_bad_lengths() {
        assert_eq!(parse_cifar10(&[]).unwrap().len(), 0);
        assert!(matches!(parse_cifar10(&[0u8; 3074]), Err(Error::Format(_))));
        let mut rec = vec![10u8];
        rec.extend(std::iter::repeat_n(0u8, 3072));
        assert!(matches!(parse_cifar10(&rec), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        for (name, label) in [("data_batch_2.bin", 5u8), ("data_batch_1.bin", 1), ("test_batch.bin", 9)] {
            let mut rec = vec![label];
            rec.extend(std::iter::repeat_n(0u8, 3072));
            fs::write(dir.path().join(name), rec).unwrap();
        }
        let ds = load_cifar10(dir.path()).unwrap();
        assert_eq!(ds.labels(), &[1, 5]);
        let test = load_cifar10(&dir.path().join("test_batch.bin")).unwrap();
        assert_eq!(test.labels(), &[9]);
    }

    fn four_blobs(sigma: f64, per_class: usize, seed: u64) -> BlobSpec {
        BlobSpec {
            n_classes: 4,
            input_dim: 2,
            class_centers: vec![vec![0.1, 0.1], vec![0.2, 0.1], vec![0.8, 0.9], vec![0.9, 0.9]],
            noise_stddev: sigma,
            samples_per_class: per_class,
            seed,
        }
    }

    #[test]
    fn blobs_degenerate_noise_sits_on_centers() {
        let mut spec = four_blobs(1e-12, 5, 3);
        spec.class_centers[3] = vec![1.4, -0.2];
        let ds = synth_blobs(&spec).unwrap();
        for i in 0..ds.len() {
            let c: Vec<f64> = spec.class_centers[ds.label(i)].iter().map(|v| v.clamp(0.0, 1.0)).collect();
            for (a, b) in ds.input(i).iter().zip(&c) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blobs_are_deterministic_and_empty_is_fine() {
        let spec = four_blobs(0.02, 30, 11);
        assert_eq!(synth_blobs(&spec).unwrap(), synth_blobs(&spec).unwrap());
        let empty = synth_blobs(&four_blobs(0.02, 0, 11)).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn blobs_reject_bad_specs() {
        let mut spec = four_blobs(0.02, 3, 1);
        spec.noise_stddev = 0.0;
        assert!(synth_blobs(&spec).is_err());
        let mut spec = four_blobs(0.02, 3, 1);
        spec.class_centers[2] = spec.class_centers[0].clone();
        assert!(synth_blobs(&spec).is_err());
    }

    fn nearest_centroid_errors(spec: &BlobSpec, ds: &Dataset) -> usize {
        let mut errors = 0;
        for i in 0..ds.len() {
            let x = ds.input(i);
            let nearest = (0..spec.n_classes)
                .min_by(|&a, &b| {
                    let da: f64 = spec.class_centers[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f64 = spec.class_centers[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            errors += usize::from(nearest != ds.label(i));
        }
        errors
    }

    #[test]
    fn paired_blobs_are_nearest_centroid_separable() {
        let spec = four_blobs(0.02, 10, 5);
        assert_eq!(nearest_centroid_errors(&spec, &synth_blobs(&spec).unwrap()), 0);
        // each paired center is 2.5 sigma from its bisector, so about 0.62%
        // of points cross: 5 expected out of 800
        let spec = four_blobs(0.02, 200, 5);
        let errors = nearest_centroid_errors(&spec, &synth_blobs(&spec).unwrap());
        assert!(errors <= 12, "{errors} nearest-centroid errors");
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let sizes: Vec<usize> = batch_indices(5, 2, 9, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(batch_indices(7, 3, 4, 2), batch_indices(7, 3, 4, 2));
        let single = batch_indices(6, 10, 4, 0);
        assert_eq!(single.len(), 1);
        let mut sorted = single[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn idx_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let inputs: Vec<f64> = (0..24).map(|v| f64::from((v * 37 % 256) as u8) / 255.0).collect();
        let ds = Dataset::new("t", 3, vec![1, 2, 3], inputs, vec![0, 2, 1, 2]).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        save_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.sample_shape(), ds.sample_shape());
        for i in 0..ds.len() {
            assert_eq!(back.input(i), ds.input(i));
        }
    }

    proptest! {
        #[test]
        fn idx_round_trip_is_exact(
            rows in 1usize..4, cols in 1usize..5,
            pixels in proptest::collection::vec(any::<u8>(), 0..60),
            seed in any::<u64>(),
        ) {
            let dim = rows * cols;
            let n = pixels.len() / dim;
            let inputs: Vec<f64> = pixels[..n * dim].iter().map(|&b| f64::from(b) / 255.0).collect();
            let labels: Vec<usize> = (0..n).map(|i| ((seed as usize).wrapping_add(i * 7)) % 10).collect();
            let ds = Dataset::new("p", 10, vec![1, rows, cols], inputs, labels).unwrap();
            let (imgs, labs) = encode_idx(&ds).unwrap();
            let back = parse_idx(&imgs, &labs).unwrap();
            prop_assert_eq!(back.labels(), ds.labels());
            for i in 0..n {
                prop_assert_eq!(back.input(i), ds.input(i));
                prop_assert!(back.input(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn shuffling_is_a_permutation(n in 0usize..200, bs in 1usize..50, seed in any::<u64>(), epoch in 0u64..10) {
            let mut all: Vec<usize> = batch_indices(n, bs, seed, epoch).concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
