//! Loaders, synthetic data and normalization.

use std::fs;
use std::path::PathBuf;

use mgnetlab::data::load_named;
use mgnetlab::*;
use proptest::prelude::*;

fn data_root() -> Option<PathBuf> {
    let root = std::env::var_os("MGNETLAB_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    root.join("mnist/train-labels-idx1-ubyte").exists().then_some(root)
}

#[test]
fn synthetic_labels_are_uniform() {
    let d = synthetic_batch(2024, [10_000, 1, 1, 1], 10).unwrap();
    let mut counts = [0usize; 10];
    for &l in &d.labels {
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        assert!((n as f64 - 1000.0).abs() <= 50.0, "class {c}: {n}");
    }
}

#[test]
fn synthetic_batches_are_deterministic_and_bounded() {
    let a = synthetic_batch(9, [16, 3, 8, 8], 7).unwrap();
    let b = synthetic_batch(9, [16, 3, 8, 8], 7).unwrap();
    assert_eq!(a, b);
    assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.labels.iter().all(|&l| l < 7));
    assert_ne!(a, synthetic_batch(10, [16, 3, 8, 8], 7).unwrap());
}

/// Record `k` of a CIFAR file, decoded straight from the byte layout.
fn decode_record(bytes: &[u8], rec: usize, label_bytes: usize, k: usize) -> (usize, Vec<f32>) {
    let r = &bytes[k * rec..(k + 1) * rec];
    let label = r[label_bytes - 1] as usize;
    let mut img = vec![0.0f32; 3 * 32 * 32];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                img[(c * 32 + y) * 32 + x] = r[label_bytes + c * 1024 + y * 32 + x] as f32 / 255.0;
            }
        }
    }
    (label, img)
}

fn cifar_bytes(records: usize, label_bytes: usize, classes: u8, seed: u64) -> Vec<u8> {
    let mut s = seed | 1;
    let mut out = Vec::new();
    for _ in 0..records {
        for _ in 0..label_bytes {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            out.push(((s >> 33) % u64::from(classes)) as u8);
        }
        for _ in 0..3072 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            out.push((s >> 56) as u8);
        }
    }
    out
}

#[test]
fn cifar_records_match_a_byte_level_decoder() {
    let dir = tempfile::tempdir().unwrap();
    for (variant, label_bytes, classes) in [(CifarVariant::Cifar10, 1, 10u8), (CifarVariant::Cifar100, 2, 100)] {
        let p1 = dir.path().join(format!("a{label_bytes}.bin"));
        let p2 = dir.path().join(format!("b{label_bytes}.bin"));
        let b1 = cifar_bytes(3, label_bytes, classes, 1);
        let b2 = cifar_bytes(2, label_bytes, classes, 2);
        fs::write(&p1, &b1).unwrap();
        fs::write(&p2, &b2).unwrap();
        let d = load_cifar_binary(&[&p1, &p2], variant).unwrap();
        assert_eq!(d.images.shape(), Shape4::new(5, 3, 32, 32));
        assert_eq!(d.classes, classes as usize);
        let rec = 3072 + label_bytes;
        for k in 0..5 {
            let (bytes, j) = if k < 3 { (&b1, k) } else { (&b2, k - 3) };
            let (label, img) = decode_record(bytes, rec, label_bytes, j);
            assert_eq!(d.labels[k], label);
            assert_eq!(d.images.sample(k), img.as_slice(), "record {k}");
        }
    }
}

#[test]
fn cifar_size_must_be_a_record_multiple() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.bin");
    let mut b = cifar_bytes(2, 1, 10, 3);
    b.truncate(b.len() - 5);
    fs::write(&p, &b).unwrap();
    match load_cifar_binary(&[&p], CifarVariant::Cifar10) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cifar_label_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.bin");
    let mut b = cifar_bytes(2, 1, 10, 4);
    b[3073] = 10;
    fs::write(&p, &b).unwrap();
    assert!(matches!(load_cifar_binary(&[&p], CifarVariant::Cifar10), Err(Error::Format { offset: 3073, .. })));
}

#[test]
fn mnist_training_files() {
    let Some(root) = data_root() else {
        eprintln!("MNIST not found; set MGNETLAB_DATA");
        return;
    };
    let dir = root.join("mnist");
    let (ip, lp) = (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"));
    let raw_labels = fs::read(&lp).unwrap();
    let raw_images = fs::read(&ip).unwrap();
    // Header: magic, count as big-endian words; the first label is byte 8.
    assert_eq!(&raw_labels[..4], &[0, 0, 8, 1]);
    assert_eq!(raw_labels[8], 5);
    let d = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(d.images.shape(), Shape4::new(60_000, 1, 28, 28));
    assert_eq!(d.labels[0], 5);
    assert!(d.labels.iter().all(|&l| l < 10));
    let first: Vec<f32> = raw_images[16..16 + 784].iter().map(|&b| b as f32 / 255.0).collect();
    assert_eq!(d.images.sample(0), first.as_slice());
}

#[test]
fn loaders_are_pure() {
    let Some(root) = data_root() else {
        eprintln!("MNIST not found; set MGNETLAB_DATA");
        return;
    };
    let dir = root.join("mnist");
    let (ip, lp) = (dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"));
    let a = load_mnist_idx(&ip, &lp).unwrap();
    let b = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(a.len(), 10_000);
    assert!(a.images.data().iter().zip(b.images.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.labels, b.labels);
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let e = load_mnist_idx(dir.path().join("none"), dir.path().join("none")).unwrap_err();
    assert!(e.to_string().contains("none"), "{e}");
}

#[test]
fn named_synthetic_split_is_normalized() {
    let (train, test) = load_named("synthetic", std::path::Path::new("/nonexistent")).unwrap();
    assert_eq!(train.classes, 10);
    assert_eq!(test.sample_shape(), Shape4::new(1, 3, 32, 32));
    let fitted = Normalizer::fit(&train.images);
    for (m, s) in fitted.mean.iter().zip(&fitted.std) {
        assert!(m.abs() < 1e-5, "{m}");
        assert!((s - 1.0).abs() < 1e-4, "{s}");
    }
    assert!(matches!(load_named("imagenet", std::path::Path::new(".")), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalization_inverts(seed: u64, c in 1usize..4, h in 1usize..6) {
        let d = synthetic_batch(seed, [3, c, h, 5], 2).unwrap();
        let norm = Normalizer::fit(&d.images);
        let mut x = d.images.clone();
        norm.apply(&mut x).unwrap();
        norm.invert(&mut x).unwrap();
        prop_assert!(x.max_abs_diff(&d.images).unwrap() <= 1e-6);
    }
}
