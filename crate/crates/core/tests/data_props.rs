use std::path::{Path, PathBuf};

use fedtop::data::{
    binarize, encode_idx_images, encode_idx_labels, load_idx, load_mnist, make_partition,
    make_partition_with_server, parse_idx_images, parse_idx_labels, scale_features, DataError,
    PartitionMode, RawDataset, Scaling,
};
use fedtop::numkit::{DenseMatrix, RngStream};
use proptest::prelude::*;

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("FEDTOP_DATA_DIR")
        .map_or_else(|| PathBuf::from("/root/data/mnist"), PathBuf::from);
    dir.join("train-labels-idx1-ubyte").exists().then_some(dir)
}

#[test]
fn mnist_shapes_and_digit_one_count() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST files not found; skipping");
        return;
    };
    let (train, test) = load_mnist(&dir).unwrap();
    assert_eq!((train.dim(), train.len()), (784, 60_000));
    assert_eq!((test.dim(), test.len()), (784, 10_000));
    let positives: f64 = binarize(&train.labels, 1).iter().sum();
    assert_eq!(positives, 6742.0);
    let scaled = scale_features(&train.features, Scaling::Approach2).unwrap();
    assert!(scaled.as_slice().iter().all(|v| v.is_finite()));
}

#[test]
fn mnist_non_iid_gives_at_most_two_labels() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST files not found; skipping");
        return;
    };
    let (train, _) = load_mnist(&dir).unwrap();
    let part = make_partition(
        60_000,
        200,
        PartitionMode::NonIid,
        &train.labels,
        &mut RngStream::new(0, "p"),
    )
    .unwrap();
    for idx in &part.client_indices {
        assert_eq!(idx.len(), 300);
        let labels: Vec<u8> = idx.iter().map(|&k| train.labels[k]).collect();
        assert!(labels.windows(2).all(|w| w[0] <= w[1]));
        let mut distinct = labels.clone();
        distinct.dedup();
        assert!(distinct.len() <= 2);
    }
}

#[test]
fn truncated_and_mislabelled_files_are_rejected() {
    let a =
        DenseMatrix::from_row_major(4, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
    let bytes = encode_idx_images(&a, 2, 2);
    let p = Path::new("x");
    assert!(matches!(
        parse_idx_images(&bytes[..bytes.len() - 1], p),
        Err(DataError::Truncated { .. })
    ));
    assert!(matches!(
        parse_idx_labels(&bytes, p),
        Err(DataError::BadMagic { .. })
    ));

    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&img, &bytes).unwrap();
    std::fs::write(&lab, encode_idx_labels(&[1, 2, 3])).unwrap();
    assert!(matches!(
        load_idx(&img, &lab),
        Err(DataError::CountMismatch { .. })
    ));
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &lab),
        Err(DataError::Io { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_exact_disjoint_unions(
        d in 1usize..400,
        m_frac in 0.0f64..1.0,
        server in 0.0f64..0.5,
        non_iid in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed, "labels");
        let labels: Vec<u8> = (0..d).map(|_| (rng.uniform() * 10.0) as u8).collect();
        let mode = if non_iid { PartitionMode::NonIid } else { PartitionMode::Iid };
        let pool = d - (server * d as f64).floor() as usize;
        prop_assume!(pool >= 1);
        let m = 1 + ((pool - 1) as f64 * m_frac) as usize;
        let part = make_partition_with_server(d, m, mode, &labels, server, &mut RngStream::new(seed, "p")).unwrap();
        let mut seen = vec![0u8; d];
        for k in part.client_indices.iter().flatten().chain(&part.server_indices) {
            seen[*k] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = part.client_indices.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        if non_iid {
            for idx in &part.client_indices {
                prop_assert!(idx.windows(2).all(|w| labels[w[0]] <= labels[w[1]]));
            }
        }
    }

    #[test]
    fn idx_round_trip_is_byte_exact(
        rows in 1usize..6,
        cols in 1usize..6,
        count in 0usize..12,
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed, "idx");
        let pixels = (0..rows * cols * count).map(|_| (rng.uniform() * 256.0).floor()).collect();
        let labels: Vec<u8> = (0..count).map(|_| (rng.uniform() * 10.0) as u8).collect();
        let raw = RawDataset::new(DenseMatrix::from_row_major(rows * cols, count, pixels).unwrap(), labels).unwrap();
        let img = encode_idx_images(&raw.features, rows, cols);
        let lab = encode_idx_labels(&raw.labels);
        let back_img = parse_idx_images(&img, Path::new("i")).unwrap();
        let back_lab = parse_idx_labels(&lab, Path::new("l")).unwrap();
        prop_assert_eq!(encode_idx_images(&back_img, rows, cols), img);
        prop_assert_eq!(&back_lab, &raw.labels);
        prop_assert_eq!(back_img, raw.features);
    }
}
