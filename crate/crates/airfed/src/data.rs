//! MNIST IDX ingestion and the heterogeneous per-device partition.
//!
//! Labels are stored 1-based internally (`t` in `1..=L`; MNIST digit `d`
//! maps to label `d + 1`). Covariates are scaled to `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::LabelTable;
use crate::{Error, Result};

pub type CovariateTable = LabelTable;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Labelled dataset with covariates in `[0, 1]` and 1-based labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    covariates: Vec<f64>, // n x dim, row-major
    labels: Vec<usize>,   // 1..=num_classes
    dim: usize,
    num_classes: usize,
    by_label: Vec<Vec<usize>>, // per-label index lists, partition of 0..n
}

impl LabeledDataset {
    pub fn new(covariates: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if labels.len() * dim != covariates.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} covariate values for {} labels of dim {dim}",
                covariates.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&t| t == 0 || t > num_classes) {
            return Err(Error::ShapeMismatch("label out of 1..=L".into()));
        }
        let mut by_label = vec![Vec::new(); num_classes];
        for (i, &t) in labels.iter().enumerate() {
            by_label[t - 1].push(i);
        }
        Ok(LabeledDataset {
            covariates,
            labels,
            dim,
            num_classes,
            by_label,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Indices of all examples with label `t` (1-based).
    pub fn by_label(&self, t: usize) -> &[usize] {
        &self.by_label[t - 1]
    }

    /// New dataset containing the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut covariates = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            covariates.extend_from_slice(self.covariates(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(covariates, labels, self.dim, self.num_classes)
            .expect("subset of a valid dataset is valid")
    }
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

fn be_u32(bytes: &[u8], off: usize, path: &str) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::TruncatedIdx {
            path: path.into(),
            need: end,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[off..end].try_into().unwrap()))
}

/// Load an IDX image/label pair. Pixel bytes are scaled by 1/255 and digit
/// `d` becomes label `d + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let ipath = images_path.as_ref().display().to_string();
    let lpath = labels_path.as_ref().display().to_string();
    let ibytes = std::fs::read(images_path.as_ref())?;
    let lbytes = std::fs::read(labels_path.as_ref())?;

    let magic = be_u32(&ibytes, 0, &ipath)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: ipath,
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(&ibytes, 4, &ipath)? as usize;
    let rows = be_u32(&ibytes, 8, &ipath)? as usize;
    let cols = be_u32(&ibytes, 12, &ipath)? as usize;
    let dim = rows * cols;
    if ibytes.len() < 16 + n * dim {
        return Err(Error::TruncatedIdx {
            path: ipath,
            need: 16 + n * dim,
            have: ibytes.len(),
        });
    }

    let magic = be_u32(&lbytes, 0, &lpath)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: lpath,
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let n_labels = be_u32(&lbytes, 4, &lpath)? as usize;
    if n_labels != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    if lbytes.len() < 8 + n {
        return Err(Error::TruncatedIdx {
            path: lpath,
            need: 8 + n,
            have: lbytes.len(),
        });
    }

    let covariates: Vec<f64> = ibytes[16..16 + n * dim]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lbytes[8..8 + n].iter().map(|&b| b as usize + 1).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(1);
    LabeledDataset::new(covariates, labels, dim, num_classes)
}

/// Serialize a dataset back to IDX bytes (images as 28x28-style square or
/// `1 x dim` when not square). Inverse of [`load_idx`] up to header shape.
pub fn idx_bytes(ds: &LabeledDataset) -> (Vec<u8>, Vec<u8>) {
    let n = ds.len() as u32;
    let dim = ds.dim();
    let side = (dim as f64).sqrt() as usize;
    let (rows, cols) = if side * side == dim { (side, side) } else { (1, dim) };

    let mut images = Vec::with_capacity(16 + ds.len() * dim);
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in &ds.covariates {
        images.push((v * 255.0).round() as u8);
    }

    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for &t in &ds.labels {
        labels.push((t - 1) as u8);
    }
    (images, labels)
}

pub fn write_idx(
    ds: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = idx_bytes(ds);
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Heterogeneous partition
// ---------------------------------------------------------------------------

/// How to split a corpus across devices and deplete each device's target
/// labels.
#[derive(Clone, Debug)]
pub struct PartitionSpec {
    pub devices: usize,
    pub per_device: usize,
    /// Target labels per device (1-based), e.g. `[[3,6,9],[2,5,8],[1,4,7]]`.
    pub target_labels: Vec<Vec<usize>>,
    /// Samples kept per target label.
    pub keep_per_target: usize,
    pub seed: u64,
}

/// Result of [`partition_heterogeneous`]: device datasets plus the corpus
/// rows they came from (aligned with the dataset rows).
#[derive(Clone, Debug)]
pub struct Partition {
    pub devices: Vec<LabeledDataset>,
    pub corpus_indices: Vec<Vec<usize>>,
}

/// Draw pairwise-disjoint uniform device sets, then deplete each device's
/// target labels down to `keep_per_target` uniformly chosen samples each.
/// Deterministic given `spec.seed`.
pub fn partition_heterogeneous(corpus: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    let need = spec.devices * spec.per_device;
    if need > corpus.len() {
        return Err(Error::CorpusTooSmall {
            need,
            have: corpus.len(),
        });
    }
    if spec.target_labels.len() != spec.devices {
        return Err(Error::Config(format!(
            "{} target label sets for {} devices",
            spec.target_labels.len(),
            spec.devices
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);

    let mut devices = Vec::with_capacity(spec.devices);
    let mut corpus_indices = Vec::with_capacity(spec.devices);
    for k in 0..spec.devices {
        let draw = &order[k * spec.per_device..(k + 1) * spec.per_device];
        let mut keep: Vec<bool> = vec![true; draw.len()];
        for &t in &spec.target_labels[k] {
            let mut hits: Vec<usize> = draw
                .iter()
                .enumerate()
                .filter(|(_, &ci)| corpus.label(ci) == t)
                .map(|(i, _)| i)
                .collect();
            if hits.len() < spec.keep_per_target {
                return Err(Error::InsufficientTargetSamples {
                    device: k + 1,
                    label: t,
                    have: hits.len(),
                    need: spec.keep_per_target,
                });
            }
            hits.shuffle(&mut rng);
            for &i in &hits[spec.keep_per_target..] {
                keep[i] = false;
            }
        }
        let kept: Vec<usize> = draw
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&ci, _)| ci)
            .collect();
        devices.push(corpus.subset(&kept));
        corpus_indices.push(kept);
    }
    Ok(Partition {
        devices,
        corpus_indices,
    })
}

// ---------------------------------------------------------------------------
// Per-label covariate averages
// ---------------------------------------------------------------------------

/// Row `t` is the mean covariate vector of the examples with label `t`.
/// Every label must be present in the set.
pub fn average_covariates(ds: &LabeledDataset) -> Result<CovariateTable> {
    let mut table = LabelTable::zeros(ds.num_classes(), ds.dim());
    for t in 1..=ds.num_classes() {
        let idx = ds.by_label(t);
        if idx.is_empty() {
            return Err(Error::EmptyLabel { label: t });
        }
        let row = table.row_mut(t);
        for &i in idx {
            for (r, &v) in row.iter_mut().zip(ds.covariates(i)) {
                *r += v;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        for r in row.iter_mut() {
            *r *= inv;
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(magic_i: u32, magic_l: u32, n_i: u32, n_l: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&magic_i.to_be_bytes());
        images.extend_from_slice(&n_i.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(pixels);
        let mut lab = Vec::new();
        lab.extend_from_slice(&magic_l.to_be_bytes());
        lab.extend_from_slice(&n_l.to_be_bytes());
        lab.extend_from_slice(labels);
        (images, lab)
    }

    fn write_pair(dir: &std::path::Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn load_idx_hand_built() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_pair(2051, 2049, 1, 1, &[0, 255, 128, 64], &[3]);
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dim(), 4);
        let c = ds.covariates(0);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[1], 1.0);
        assert!((c[2] - 128.0 / 255.0).abs() < 1e-15);
        assert!((c[3] - 64.0 / 255.0).abs() < 1e-15);
        // digit 3 -> label 4
        assert_eq!(ds.label(0), 4);
    }

    #[test]
    fn load_idx_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_pair(2052, 2049, 1, 1, &[0; 4], &[0]);
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        match load_idx(&ip, &lp) {
            Err(Error::BadMagic { expected, got, .. }) => {
                assert_eq!(expected, 2051);
                assert_eq!(got, 2052);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn load_idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = Vec::new();
        for _ in 0..10 {
            pixels.extend_from_slice(&[0; 4]);
        }
        let (images, labels) = idx_pair(2051, 2049, 10, 9, &pixels, &[0; 9]);
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        match load_idx(&ip, &lp) {
            Err(Error::CountMismatch { images, labels }) => {
                assert_eq!((images, labels), (10, 9));
            }
            other => panic!("expected CountMismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_idx_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_pair(2051, 2049, 2, 2, &[0; 5], &[0, 1]);
        let (ip, lp) = write_pair(dir.path(), &images, &labels);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::TruncatedIdx { .. })));
    }

    #[test]
    fn idx_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..4 * 7).map(|i| (i * 37 % 256) as u8).collect();
        let labels: Vec<u8> = (0..7).map(|i| (i % 10) as u8).collect();
        let (images, lab) = idx_pair(2051, 2049, 7, 7, &pixels, &labels);
        let (ip, lp) = write_pair(dir.path(), &images, &lab);
        let ds = load_idx(&ip, &lp).unwrap();
        let (im2, lb2) = idx_bytes(&ds);
        assert_eq!(im2, images);
        assert_eq!(lb2, lab);
    }

    fn synthetic_corpus(n: usize, classes: usize, dim: usize) -> LabeledDataset {
        let covs: Vec<f64> = (0..n * dim).map(|i| ((i * 31) % 97) as f64 / 97.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes + 1).collect();
        LabeledDataset::new(covs, labels, dim, classes).unwrap()
    }

    fn paper_spec(seed: u64) -> PartitionSpec {
        PartitionSpec {
            devices: 3,
            per_device: 200,
            target_labels: vec![vec![3, 6, 9], vec![2, 5, 8], vec![1, 4, 7]],
            keep_per_target: 5,
            seed,
        }
    }

    #[test]
    fn partition_disjoint_and_deterministic() {
        let corpus = synthetic_corpus(3000, 10, 4);
        let p1 = partition_heterogeneous(&corpus, &paper_spec(7)).unwrap();
        let p2 = partition_heterogeneous(&corpus, &paper_spec(7)).unwrap();
        assert_eq!(p1.corpus_indices, p2.corpus_indices);
        let p3 = partition_heterogeneous(&corpus, &paper_spec(8)).unwrap();
        assert_ne!(p1.corpus_indices, p3.corpus_indices);

        use std::collections::HashSet;
        let sets: Vec<HashSet<usize>> = p1
            .corpus_indices
            .iter()
            .map(|v| v.iter().copied().collect())
            .collect();
        for a in 0..sets.len() {
            for b in a + 1..sets.len() {
                assert!(sets[a].is_disjoint(&sets[b]));
            }
        }
    }

    #[test]
    fn partition_depletes_targets_exactly() {
        let corpus = synthetic_corpus(3000, 10, 4);
        let spec = paper_spec(42);
        let p = partition_heterogeneous(&corpus, &spec).unwrap();
        for (k, ds) in p.devices.iter().enumerate() {
            for t in 1..=10 {
                let count = ds.by_label(t).len();
                if spec.target_labels[k].contains(&t) {
                    assert_eq!(count, 5, "device {k} label {t}");
                } else {
                    assert!(count > 0);
                }
            }
        }
    }

    #[test]
    fn partition_size_matches_recount_oracle() {
        // device size = per_device - (raw target count) + 3 * keep
        let corpus = synthetic_corpus(3000, 10, 4);
        let spec = paper_spec(9);
        let p = partition_heterogeneous(&corpus, &spec).unwrap();

        // independently recount the raw draw with the same seeded shuffle
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        for k in 0..3 {
            let draw = &order[k * spec.per_device..(k + 1) * spec.per_device];
            let raw_targets = draw
                .iter()
                .filter(|&&ci| spec.target_labels[k].contains(&corpus.label(ci)))
                .count();
            assert_eq!(p.devices[k].len(), spec.per_device - raw_targets + 15);
        }
    }

    #[test]
    fn partition_non_target_counts_equal_raw_draw() {
        let corpus = synthetic_corpus(3000, 10, 4);
        let spec = paper_spec(3);
        let p = partition_heterogeneous(&corpus, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        for k in 0..3 {
            let draw = &order[k * spec.per_device..(k + 1) * spec.per_device];
            for t in 1..=10 {
                if spec.target_labels[k].contains(&t) {
                    continue;
                }
                let raw = draw.iter().filter(|&&ci| corpus.label(ci) == t).count();
                assert_eq!(p.devices[k].by_label(t).len(), raw);
            }
        }
    }

    #[test]
    fn partition_errors_when_too_few_target_samples() {
        // corpus with a single example of label 1
        let mut labels = vec![2usize; 50];
        labels[0] = 1;
        let covs = vec![0.0; 50 * 2];
        let corpus = LabeledDataset::new(covs, labels, 2, 2).unwrap();
        let spec = PartitionSpec {
            devices: 1,
            per_device: 50,
            target_labels: vec![vec![1]],
            keep_per_target: 5,
            seed: 0,
        };
        assert!(matches!(
            partition_heterogeneous(&corpus, &spec),
            Err(Error::InsufficientTargetSamples { .. })
        ));
    }

    #[test]
    fn partition_errors_when_corpus_too_small() {
        let corpus = synthetic_corpus(100, 10, 2);
        let mut spec = paper_spec(0);
        spec.per_device = 50; // 3 x 50 > 100
        assert!(matches!(
            partition_heterogeneous(&corpus, &spec),
            Err(Error::CorpusTooSmall { .. })
        ));
    }

    #[test]
    fn average_covariates_hand_mean() {
        let ds = LabeledDataset::new(vec![0.0, 1.0, 1.0, 0.0], vec![1, 1], 2, 1).unwrap();
        let table = average_covariates(&ds).unwrap();
        assert_eq!(table.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn average_covariates_single_sample_identity() {
        let ds = LabeledDataset::new(vec![0.1, 0.9, 0.4, 0.6], vec![2, 1], 2, 2).unwrap();
        let table = average_covariates(&ds).unwrap();
        assert_eq!(table.row(1), &[0.4, 0.6]);
        assert_eq!(table.row(2), &[0.1, 0.9]);
    }

    #[test]
    fn average_covariates_empty_label_errors() {
        let ds = LabeledDataset::new(vec![0.0, 0.0], vec![1], 2, 2).unwrap();
        assert!(matches!(
            average_covariates(&ds),
            Err(Error::EmptyLabel { label: 2 })
        ));
    }

    #[test]
    fn average_covariates_rows_stay_in_unit_range() {
        let corpus = synthetic_corpus(900, 10, 6);
        let p = partition_heterogeneous(&corpus, &paper_spec(5)).unwrap();
        for ds in &p.devices {
            let table = average_covariates(ds).unwrap();
            assert!(table.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
