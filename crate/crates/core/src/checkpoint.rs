//! Weight files: `MGNW`, a little-endian `u32` version, a `u64` header
//! length, a JSON header, then every tensor as raw little-endian scalars.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::{BuildOptions, ModelGraph};
use crate::model::spec::{parse_model_spec, Stem};
use crate::tensor::{Precision, Scalar};

const MAGIC: &[u8; 4] = b"MGNW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: String,
    pub num_classes: usize,
    pub input_channels: usize,
    pub stem: Stem,
    pub batch_norm: bool,
    pub transition_kernel: usize,
    pub dtype: Precision,
    pub tensors: Vec<TensorEntry>,
    /// Channel count of each running-statistics slot (mean then variance).
    pub stats: Vec<usize>,
}

pub fn to_bytes<T: Scalar>(g: &ModelGraph<T>) -> Vec<u8> {
    let header = Header {
        spec: g.spec.to_string(),
        num_classes: g.spec.num_classes,
        input_channels: g.spec.input_channels,
        stem: g.spec.stem,
        batch_norm: g.options.batch_norm,
        transition_kernel: g.options.transition_kernel,
        dtype: T::PRECISION,
        tensors: g.params.iter().map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().as_array() }).collect(),
        stats: g.stats.iter().map(|s| s.mean.len()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + g.params.scalar_count() * T::PRECISION.byte_width());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    for (_, p) in g.params.iter() {
        p.value.data().iter().for_each(|v| v.to_le_bytes_into(&mut out));
    }
    for s in &g.stats {
        s.mean.iter().chain(&s.var).for_each(|v| v.to_le_bytes_into(&mut out));
    }
    out
}

pub fn save<T: Scalar>(g: &ModelGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(g)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            offset: self.bytes.len() as u64,
            msg: format!("truncated while reading {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: offset as u64, msg: msg.into() }
    }

    fn scalars<T: Scalar>(&mut self, dtype: Precision, n: usize, what: &str) -> Result<Vec<T>> {
        let w = dtype.byte_width();
        let raw = self.take(n * w, what)?;
        Ok(raw
            .chunks_exact(w)
            .map(|c| match dtype {
                Precision::Single => T::from_f64_lossy(f64::from(f32::from_le_slice(c))),
                Precision::Double => T::from_f64_lossy(f64::from_le_slice(c)),
            })
            .collect())
    }
}

/// Reads a weight file, converting to `T` if it was stored at the other
/// precision.
pub fn from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ModelGraph<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "not a weight file (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?).map_err(|e| r.fail(16, format!("bad header: {e}")))?;
    let spec = parse_model_spec(&header.spec)
        .map_err(|e| r.fail(16, format!("bad spec in header: {e}")))?
        .with_classes(header.num_classes)
        .with_input_channels(header.input_channels)
        .with_stem(header.stem);
    let opts = BuildOptions { batch_norm: header.batch_norm, transition_kernel: header.transition_kernel };
    let mut g = ModelGraph::<T>::new(&spec, opts)?;
    if header.tensors.len() != g.params.len() || header.stats.len() != g.stats.len() {
        return Err(r.fail(16, "header does not match the architecture it names"));
    }
    for ((_, p), e) in g.params.iter_mut().zip(&header.tensors) {
        if p.name != e.name || p.value.shape().as_array() != e.shape {
            return Err(r.fail(16, format!("tensor `{}` {:?} does not match `{}` {}", e.name, e.shape, p.name, p.value.shape())));
        }
        let at = r.pos;
        let data = r.scalars::<T>(header.dtype, p.value.len(), &e.name)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(r.fail(at, format!("non-finite value in `{}`", e.name)));
        }
        p.value.data_mut().copy_from_slice(&data);
    }
    for (s, &c) in g.stats.iter_mut().zip(&header.stats) {
        if c != s.mean.len() {
            return Err(r.fail(16, "statistics slot size mismatch"));
        }
        s.mean = r.scalars(header.dtype, c, "running mean")?;
        s.var = r.scalars(header.dtype, c, "running variance")?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes"));
    }
    Ok(g)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::parse_model_spec;
    use crate::train::kaiming_init;

    #[test]
    fn round_trip_is_exact() {
        let spec = parse_model_spec("PreactResNet[1,2]-[4,6]-Al-Bli").unwrap().with_classes(7);
        let mut g = ModelGraph::<f32>::new(&spec, BuildOptions::default()).unwrap();
        kaiming_init(&mut g, 11);
        g.stats[0].mean[1] = 0.25;
        let bytes = to_bytes(&g);
        let h: ModelGraph<f32> = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(h.spec, g.spec);
        for ((_, a), (_, b)) in g.params.iter().zip(h.params.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(h.stats, g.stats);
        let d: ModelGraph<f64> = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(d.params.value(d.head_w).cast::<f32>(), *g.params.value(g.head_w));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let spec = parse_model_spec("MgNet[1]-[2]-Bl").unwrap();
        let g = ModelGraph::<f64>::new(&spec, BuildOptions::default()).unwrap();
        let bytes = to_bytes(&g);
        let p = Path::new("mem");
        assert!(matches!(from_bytes::<f64>(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f64>(&bad, p), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes::<f64>(&extra, p), Err(Error::Format { .. })));
    }
}
