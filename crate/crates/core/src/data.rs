//! Dataset ingestion, feature scaling, partitioning and synthetic data.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numkit::{DenseMatrix, DenseVector, NumError, RngStream};
use crate::objectives::sigmoid;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic number {found:#010x} in {path} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path} is truncated: need {needed} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("feature scaling needs at least two examples, got {0}")]
    TooFewExamples(usize),
    #[error("cannot split {examples} examples among {clients} clients")]
    TooManyClients { clients: usize, examples: usize },
    #[error("density must lie in [0, 1], got {0}")]
    BadDensity(f64),
    #[error("fraction must lie in [0, 1), got {0}")]
    BadFraction(f64),
    #[error("label vector has {labels} entries but the feature matrix has {examples} columns")]
    LabelCount { labels: usize, examples: usize },
    #[error(transparent)]
    Numeric(#[from] NumError),
}

/// Features (`n × d`, columns are examples) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub features: DenseMatrix,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn new(features: DenseMatrix, labels: Vec<u8>) -> Result<Self, DataError> {
        if labels.len() != features.cols() {
            return Err(DataError::LabelCount {
                labels: labels.len(),
                examples: features.cols(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Columns `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> RawDataset {
        RawDataset {
            features: self.features.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    let slice = bytes.get(at..at + 4).ok_or_else(|| DataError::Truncated {
        path: path.to_path_buf(),
        needed: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("four bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parse an IDX image file into an `(rows·cols) × count` matrix of raw
/// pixel values.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<DenseMatrix, DataError> {
    check_magic(bytes, IDX_IMAGE_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let n = rows * cols;
    let needed = 16 + count * n;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    let pixels = &bytes[16..needed];
    let mut a = DenseMatrix::zeros(n, count);
    let out = a.as_mut_slice();
    for j in 0..count {
        for (i, px) in pixels[j * n..(j + 1) * n].iter().enumerate() {
            out[i * count + j] = f64::from(*px);
        }
    }
    Ok(a)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    check_magic(bytes, IDX_LABEL_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<RawDataset, DataError> {
    let a = parse_idx_images(&read_file(images)?, images)?;
    let t = parse_idx_labels(&read_file(labels)?, labels)?;
    if a.cols() != t.len() {
        return Err(DataError::CountMismatch {
            images: a.cols(),
            labels: t.len(),
        });
    }
    Ok(RawDataset {
        features: a,
        labels: t,
    })
}

/// Official MNIST train and test splits from a directory holding the four
/// uncompressed IDX files.
pub fn load_mnist(dir: &Path) -> Result<(RawDataset, RawDataset), DataError> {
    let train = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
    let test = load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
    Ok((train, test))
}

/// Serialize images as IDX bytes. Pixel values are rounded and clamped
/// to `0..=255`.
pub fn encode_idx_images(a: &DenseMatrix, rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(
        rows * cols,
        a.rows(),
        "image shape must match feature count"
    );
    let count = a.cols();
    let mut out = Vec::with_capacity(16 + rows * cols * count);
    for v in [IDX_IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for j in 0..count {
        for i in 0..a.rows() {
            out.push(a.get(i, j).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(
    images: &Path,
    labels: &Path,
    data: &RawDataset,
    rows: usize,
    cols: usize,
) -> Result<(), DataError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::write(images, encode_idx_images(&data.features, rows, cols)).map_err(io_err(images))?;
    fs::write(labels, encode_idx_labels(&data.labels)).map_err(io_err(labels))?;
    Ok(())
}

/// `t_j = 1` iff `labels_j == positive`.
pub fn binarize(labels: &[u8], positive: u8) -> DenseVector {
    labels
        .iter()
        .map(|&l| if l == positive { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    None,
    /// Offset `mean ⊘ std` per feature row.
    Approach1,
    /// Offset `mean ⊘ var` per feature row.
    #[default]
    Approach2,
}

/// Per-row offsets `a_i = mean_i / std_i` (or `/ var_i`) with sample
/// normalization; non-finite ratios become 0.
pub fn scaling_offsets(a: &DenseMatrix, mode: Scaling) -> Result<Vec<f64>, DataError> {
    let d = a.cols();
    if mode == Scaling::None {
        return Ok(vec![0.0; a.rows()]);
    }
    if d < 2 {
        return Err(DataError::TooFewExamples(d));
    }
    Ok((0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (d - 1) as f64;
            let ratio = match mode {
                Scaling::Approach1 => mean / var.sqrt(),
                Scaling::Approach2 => mean / var,
                Scaling::None => unreachable!(),
            };
            if ratio.is_finite() {
                ratio
            } else {
                0.0
            }
        })
        .collect())
}

/// Subtract per-row offsets from every column.
pub fn apply_offsets(a: &mut DenseMatrix, offsets: &[f64]) {
    assert_eq!(offsets.len(), a.rows(), "one offset per feature row");
    for (i, off) in offsets.iter().enumerate() {
        if *off != 0.0 {
            for v in a.row_mut(i) {
                *v -= off;
            }
        }
    }
}

pub fn scale_features(a: &DenseMatrix, mode: Scaling) -> Result<DenseMatrix, DataError> {
    let offsets = scaling_offsets(a, mode)?;
    let mut out = a.clone();
    apply_offsets(&mut out, &offsets);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionMode {
    #[default]
    Iid,
    NonIid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub server_indices: Vec<usize>,
}

/// Split `order` into `m` contiguous chunks whose sizes differ by at most
/// one; the larger chunks go to the lowest-index clients.
fn chunk(order: &[usize], m: usize) -> Vec<Vec<usize>> {
    let base = order.len() / m;
    let extra = order.len() % m;
    let mut out = Vec::with_capacity(m);
    let mut at = 0;
    for k in 0..m {
        let size = base + usize::from(k < extra);
        out.push(order[at..at + size].to_vec());
        at += size;
    }
    out
}

/// Partition `pool` (a list of example indices) among `m` clients.
pub fn partition_pool(
    pool: &[usize],
    m: usize,
    mode: PartitionMode,
    labels: &[u8],
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>, DataError> {
    if m == 0 || m > pool.len() {
        return Err(DataError::TooManyClients {
            clients: m,
            examples: pool.len(),
        });
    }
    let order: Vec<usize> = match mode {
        PartitionMode::Iid => rng
            .permutation(pool.len())
            .into_iter()
            .map(|k| pool[k])
            .collect(),
        PartitionMode::NonIid => {
            let mut sorted = pool.to_vec();
            sorted.sort_by_key(|&j| labels[j]);
            sorted
        }
    };
    Ok(chunk(&order, m))
}

pub fn make_partition(
    d: usize,
    m: usize,
    mode: PartitionMode,
    labels: &[u8],
    rng: &mut RngStream,
) -> Result<Partition, DataError> {
    let pool: Vec<usize> = (0..d).collect();
    Ok(Partition {
        client_indices: partition_pool(&pool, m, mode, labels, rng)?,
        server_indices: Vec::new(),
    })
}

/// Carve `⌊fraction·d⌋` examples for the server uniformly at random, then
/// partition the remainder among `m` clients.
pub fn make_partition_with_server(
    d: usize,
    m: usize,
    mode: PartitionMode,
    labels: &[u8],
    server_fraction: f64,
    rng: &mut RngStream,
) -> Result<Partition, DataError> {
    if !(0.0..1.0).contains(&server_fraction) {
        return Err(DataError::BadFraction(server_fraction));
    }
    let server_count = (server_fraction * d as f64).floor() as usize;
    let perm = rng.permutation(d);
    let mut server: Vec<usize> = perm[..server_count].to_vec();
    server.sort_unstable();
    let mut pool: Vec<usize> = perm[server_count..].to_vec();
    pool.sort_unstable();
    Ok(Partition {
        client_indices: partition_pool(&pool, m, mode, labels, rng)?,
        server_indices: server,
    })
}

/// Label rule for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SynthLabels {
    /// `t ~ Bernoulli(σ(aᵀw))`
    #[default]
    Bernoulli,
    /// `t = 1` iff `aᵀw + ε > 0` with `ε ~ N(0, noise_var)` per example.
    /// No intercept, matching a model without a bias term.
    Sign { noise_var: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Labels are 0 or 1.
    pub data: RawDataset,
    pub true_w: DenseVector,
}

/// Number of nonzero weights for a density: `⌈density·n⌉`, at least 1.
pub fn synth_nonzeros(n: usize, density: f64) -> usize {
    ((density * n as f64).ceil() as usize).clamp(1, n.max(1))
}

pub fn synth_sparse_logistic(
    n: usize,
    d_total: usize,
    density: f64,
    labels: SynthLabels,
    rng: &mut RngStream,
) -> Result<SynthData, DataError> {
    if !(0.0..=1.0).contains(&density) {
        return Err(DataError::BadDensity(density));
    }
    let k = synth_nonzeros(n, density);
    let mut true_w = DenseVector::zeros(n);
    let support = crate::numkit::rng_uniform_subset(rng, n, k)?;
    for j in support {
        true_w[j] = rng.standard_normal();
    }
    let mut a = DenseMatrix::zeros(n, d_total);
    for v in a.as_mut_slice() {
        *v = rng.standard_normal();
    }
    let scores = a.matvec_t(&true_w);
    let t = match labels {
        SynthLabels::Bernoulli => scores
            .iter()
            .map(|s| u8::from(rng.uniform() < sigmoid(*s)))
            .collect(),
        SynthLabels::Sign { noise_var } => {
            let sd = noise_var.sqrt();
            scores
                .iter()
                .map(|s| u8::from(s + sd * rng.standard_normal() > 0.0))
                .collect()
        }
    };
    Ok(SynthData {
        data: RawDataset {
            features: a,
            labels: t,
        },
        true_w,
    })
}

/// Random split into (train, test) with `⌊fraction·d⌋` test examples.
pub fn holdout_split(
    d: usize,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DataError::BadFraction(fraction));
    }
    let perm = rng.permutation(d);
    let test_count = (fraction * d as f64).floor() as usize;
    let mut test = perm[..test_count].to_vec();
    let mut train = perm[test_count..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    fn tiny_image_bytes() -> Vec<u8> {
        vec![
            0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 128, 255, 64,
        ]
    }

    #[test]
    fn parses_fixed_idx_example() {
        let a = parse_idx_images(&tiny_image_bytes(), p()).unwrap();
        assert_eq!((a.rows(), a.cols()), (4, 1));
        assert_eq!(a.as_slice(), &[0.0, 128.0, 255.0, 64.0]);
        let t = parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 1, 7], p()).unwrap();
        assert_eq!(t, vec![7]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let mut wrong = tiny_image_bytes();
        wrong[3] = 1;
        assert!(matches!(
            parse_idx_images(&wrong, p()),
            Err(DataError::BadMagic { found: 0x801, .. })
        ));
        let short = &tiny_image_bytes()[..18];
        assert!(matches!(
            parse_idx_images(short, p()),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx_labels(&[0, 0, 8], p()),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn counts_are_big_endian() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 1, 0];
        bytes.extend(std::iter::repeat_n(3u8, 256));
        assert_eq!(parse_idx_labels(&bytes, p()).unwrap().len(), 256);
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[1, 7, 1, 0], 1).as_slice(), &[1.0, 0.0, 1.0, 0.0]);
        assert!(binarize(&[2, 3, 4], 1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scaling_examples() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(scale_features(&a, Scaling::None).unwrap(), a);
        let s = scale_features(&a, Scaling::Approach1).unwrap();
        let r2 = 2f64.sqrt();
        let expected = [1.0 - r2, 3.0 - r2, 2.0, 2.0];
        for (x, e) in s.as_slice().iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
        assert!((s.get(0, 0) + 0.41421).abs() < 1e-5 && (s.get(0, 1) - 1.58579).abs() < 1e-5);

        let c = DenseMatrix::from_rows(&[vec![5.0; 4], vec![0.0; 4]]).unwrap();
        assert_eq!(scale_features(&c, Scaling::Approach2).unwrap(), c);

        // row mean 2, sample variance 2 → offset 1
        let s = scale_features(&a, Scaling::Approach2).unwrap();
        assert_eq!(s.row(0), &[0.0, 2.0]);
    }

    #[test]
    fn scaling_needs_two_examples() {
        let a = DenseMatrix::zeros(3, 1);
        assert!(matches!(
            scale_features(&a, Scaling::Approach1),
            Err(DataError::TooFewExamples(1))
        ));
        assert!(scale_features(&a, Scaling::None).is_ok());
    }

    #[test]
    fn noniid_hand_case() {
        let mut rng = RngStream::new(0, "part");
        let part = make_partition(4, 2, PartitionMode::NonIid, &[2, 1, 0, 1], &mut rng).unwrap();
        assert_eq!(part.client_indices, vec![vec![2, 1], vec![3, 0]]);
        let labels = [0u8, 1, 1, 2];
        let part = make_partition(4, 2, PartitionMode::NonIid, &labels, &mut rng).unwrap();
        assert_eq!(part.client_indices, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn chunk_sizes_and_remainders() {
        let mut rng = RngStream::new(3, "part");
        let part = make_partition(60_000, 200, PartitionMode::Iid, &[], &mut rng).unwrap();
        assert!(part.client_indices.iter().all(|c| c.len() == 300));
        let part = make_partition(11, 3, PartitionMode::Iid, &[], &mut rng).unwrap();
        let sizes: Vec<usize> = part.client_indices.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 3]);
        assert!(matches!(
            make_partition(2, 3, PartitionMode::Iid, &[], &mut rng),
            Err(DataError::TooManyClients { .. })
        ));
    }

    #[test]
    fn server_shard_is_disjoint() {
        let mut rng = RngStream::new(8, "part");
        let labels: Vec<u8> = (0..1000).map(|i| (i % 10) as u8).collect();
        let part =
            make_partition_with_server(1000, 9, PartitionMode::NonIid, &labels, 0.1, &mut rng)
                .unwrap();
        assert_eq!(part.server_indices.len(), 100);
        let mut all: Vec<usize> = part.client_indices.concat();
        all.extend(&part.server_indices);
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert!(
            make_partition_with_server(10, 2, PartitionMode::Iid, &labels, 1.0, &mut rng).is_err()
        );
    }

    #[test]
    fn synthetic_nonzeros() {
        assert_eq!(synth_nonzeros(100, 0.0), 1);
        assert_eq!(synth_nonzeros(100, 0.1), 10);
        let mut rng = RngStream::new(1, "synth");
        let s = synth_sparse_logistic(100, 50, 0.1, SynthLabels::Bernoulli, &mut rng).unwrap();
        assert_eq!(s.true_w.iter().filter(|v| **v != 0.0).count(), 10);
        assert!(synth_sparse_logistic(10, 5, 1.5, SynthLabels::Bernoulli, &mut rng).is_err());
    }

    #[test]
    fn synthetic_labels_are_balanced_enough() {
        let mut rng = RngStream::new(2, "synth");
        let s = synth_sparse_logistic(100, 20_000, 0.1, SynthLabels::Bernoulli, &mut rng).unwrap();
        assert!(s.data.labels.iter().all(|&t| t <= 1));
        let mean = s.data.labels.iter().map(|&t| f64::from(t)).sum::<f64>() / 20_000.0;
        assert!(mean > 0.2 && mean < 0.8, "{mean}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_sparse_logistic(
            20,
            30,
            0.2,
            SynthLabels::Sign { noise_var: 0.1 },
            &mut RngStream::new(5, "s"),
        )
        .unwrap();
        let b = synth_sparse_logistic(
            20,
            30,
            0.2,
            SynthLabels::Sign { noise_var: 0.1 },
            &mut RngStream::new(5, "s"),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn holdout_is_a_partition() {
        let mut rng = RngStream::new(6, "split");
        let (train, test) = holdout_split(100, 0.2, &mut rng).unwrap();
        assert_eq!(test.len(), 20);
        let mut all = [train, test].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
