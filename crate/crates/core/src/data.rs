//! Dataset loaders and normalization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images in `(N, C, H, W)` plus one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor4<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Input(format!("{} images but {} labels", images.shape().n, labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} outside {classes} classes")));
        }
        Ok(Dataset { name: name.into(), images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> Shape4 {
        let s = self.images.shape();
        Shape4::new(1, s.c, s.h, s.w)
    }

    /// Images and labels at `indices`, converted to `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor4<T>, Vec<usize>)> {
        let x = self.images.gather_samples(indices)?.cast();
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset::new(self.name.clone(), self.images.gather_samples(&idx)?, self.labels[..n].to_vec(), self.classes)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset: offset as u64, msg: msg.into() }
}

fn be_u32(bytes: &[u8], path: &Path, offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), "file ends inside the header"))
}

fn idx_checked<'a>(bytes: &'a [u8], path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, path, 0)?;
    if found != magic {
        return Err(format_err(path, 0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, path, 4 + 4 * d).map(|v| v as usize)).collect::<Result<_>>()?;
    let header = 4 + 4 * dims;
    let need = shape.iter().product::<usize>();
    let body = &bytes[header..];
    if body.len() < need {
        return Err(format_err(path, bytes.len(), format!("truncated: {} payload bytes, expected {need}", body.len())));
    }
    if body.len() > need {
        return Err(format_err(path, header + need, "trailing bytes after payload"));
    }
    Ok((shape, body))
}

/// Big-endian IDX image and label files; pixels scaled by 1/255.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let (ishape, pixels) = idx_checked(&ib, ip, IDX_IMAGES, 3)?;
    let (lshape, labels) = idx_checked(&lb, lp, IDX_LABELS, 1)?;
    if ishape[0] != lshape[0] {
        return Err(format_err(lp, 4, format!("{} labels for {} images", lshape[0], ishape[0])));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(format_err(lp, 8 + pos, format!("label {} is not a digit", labels[pos])));
    }
    let data = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let images = Tensor4::from_vec([ishape[0], 1, ishape[1], ishape[2]], data)?;
    Dataset::new("mnist", images, labels.iter().map(|&l| usize::from(l)).collect(), 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label is kept.
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        self.label_bytes() + 3072
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Concatenates CIFAR binary batch files (channel-major 3x32x32 records).
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = read(p)?;
        if bytes.len() % rec != 0 {
            return Err(format_err(p, bytes.len() - bytes.len() % rec, format!("size {} is not a multiple of {rec}", bytes.len())));
        }
        for (k, r) in bytes.chunks_exact(rec).enumerate() {
            let label = usize::from(r[variant.label_bytes() - 1]);
            if label >= variant.classes() {
                return Err(format_err(p, k * rec + variant.label_bytes() - 1, format!("label {label} out of range")));
            }
            labels.push(label);
            pixels.extend(r[variant.label_bytes()..].iter().map(|&v| f32::from(v) / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Input("no CIFAR records".into()));
    }
    let name = match variant {
        CifarVariant::Cifar10 => "cifar10",
        CifarVariant::Cifar100 => "cifar100",
    };
    Dataset::new(name, Tensor4::from_vec([labels.len(), 3, 32, 32], pixels)?, labels, variant.classes())
}

/// Deterministic uniform images in `[0, 1)` with uniform labels.
pub fn synthetic_batch(seed: u64, shape: impl Into<Shape4>, classes: usize) -> Result<Dataset> {
    let shape = shape.into();
    shape.validate()?;
    if classes == 0 {
        return Err(Error::Input("at least one class is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.random::<f32>()).collect();
    let labels = (0..shape.n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new("synthetic", Tensor4::from_vec(shape, data)?, labels, classes)
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Channel statistics of `images`. Constant channels get unit std.
    pub fn fit(images: &Tensor4<f32>) -> Self {
        let s = images.shape();
        let count = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut sq = vec![0.0; s.c];
        for n in 0..s.n {
            for (c, (m, q)) in mean.iter_mut().zip(sq.iter_mut()).enumerate() {
                let start = images.index(n, c, 0, 0);
                for &v in &images.data()[start..start + s.plane()] {
                    *m += f64::from(v);
                    *q += f64::from(v) * f64::from(v);
                }
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &q)| {
                *m /= count;
                let var = (q / count - *m * *m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    fn map(&self, x: &mut Tensor4<f32>, f: impl Fn(f64, f64, f64) -> f64) -> Result<()> {
        let s = x.shape();
        if s.c != self.mean.len() {
            return Err(Error::shape(format!("normalizer has {} channels, images {}", self.mean.len(), s.c)));
        }
        let plane = s.plane();
        for (k, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            let c = k % s.c;
            for v in chunk {
                *v = f(f64::from(*v), self.mean[c], self.std[c]) as f32;
            }
        }
        Ok(())
    }

    pub fn apply(&self, x: &mut Tensor4<f32>) -> Result<()> {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &mut Tensor4<f32>) -> Result<()> {
        self.map(x, |v, m, s| v * s + m)
    }
}

/// Dataset identifiers understood by [`load_named`].
pub const DATASET_IDS: &[&str] = &["mnist", "cifar10", "cifar100", "synthetic"];

/// Train and test splits of a named dataset under `root`, normalized with
/// training-split statistics.
///
/// Layouts: `mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte`,
/// `cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin`,
/// `cifar-100-binary/{train,test}.bin`. `synthetic` needs no files.
pub fn load_named(id: &str, root: &Path) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match id {
        "mnist" => {
            let d = root.join("mnist");
            (
                load_mnist_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"))?,
                load_mnist_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte"))?,
            )
        }
        "cifar10" => {
            let d = root.join("cifar-10-batches-bin");
            let train: Vec<PathBuf> = (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect();
            (
                load_cifar_binary(&train, CifarVariant::Cifar10)?,
                load_cifar_binary(&[d.join("test_batch.bin")], CifarVariant::Cifar10)?,
            )
        }
        "cifar100" => {
            let d = root.join("cifar-100-binary");
            (
                load_cifar_binary(&[d.join("train.bin")], CifarVariant::Cifar100)?,
                load_cifar_binary(&[d.join("test.bin")], CifarVariant::Cifar100)?,
            )
        }
        "synthetic" => (synthetic_batch(1, [512, 3, 32, 32], 10)?, synthetic_batch(2, [128, 3, 32, 32], 10)?),
        other => return Err(Error::Config(format!("unknown dataset `{other}` (expected one of {})", DATASET_IDS.join(", ")))),
    };
    let norm = Normalizer::fit(&train.images);
    norm.apply(&mut train.images)?;
    norm.apply(&mut test.images)?;
    Ok((train, test))
}
