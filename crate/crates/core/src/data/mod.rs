//! Tensor files, dataset index and case loading.

mod augment;
mod synth;

pub use augment::{augment, hflip, vflip, AffineSpec, AugmentSpec, ElasticSpec};
pub use synth::{synth_case, synth_generate, SynthBounds, SynthCase, SynthConfig};

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::pipeline::LabelMap;
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"CTF1";

/// Contents of a tensor file in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8 { .. } => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
            TensorData::U8 { shape, .. } => shape,
        }
    }

    /// Convert to a float tensor of the caller's precision.
    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        match self {
            TensorData::F32(t) => Ok(t.cast()),
            TensorData::F64(t) => Ok(t.cast()),
            TensorData::U8 { shape, data } => Tensor::new(&shape, data.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect()),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            TensorData::F32(t) => t.payload_bytes(),
            TensorData::F64(t) => t.payload_bytes(),
            TensorData::U8 { data, .. } => data.clone(),
        }
    }
}

impl From<Tensor<f32>> for TensorData {
    fn from(t: Tensor<f32>) -> Self {
        TensorData::F32(t)
    }
}

impl From<Tensor<f64>> for TensorData {
    fn from(t: Tensor<f64>) -> Self {
        TensorData::F64(t)
    }
}

impl From<&LabelMap> for TensorData {
    fn from(m: &LabelMap) -> Self {
        TensorData::U8 {
            shape: vec![m.height, m.width],
            data: m.data.clone(),
        }
    }
}

pub fn encode_tensor(t: &TensorData, mut out: impl Write) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(dim_err!("rank {} does not fit the header", shape.len()));
    }
    out.write_all(MAGIC)?;
    out.write_all(&[t.dtype() as u8, shape.len() as u8])?;
    for &d in shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    out.write_all(&t.payload())?;
    Ok(())
}

pub fn decode_tensor(mut input: impl Read) -> Result<TensorData> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CTF1 magic".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Corrupt("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = count.and_then(|n| n.checked_mul(dtype.size()));
    let payload = &bytes[header..];
    if expected != Some(payload.len()) {
        return Err(Error::Corrupt(format!(
            "header declares {shape:?} ({expected:?} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => TensorData::F32(Tensor::new(&shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
        DType::F64 => TensorData::F64(Tensor::new(&shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
        DType::U8 => TensorData::U8 {
            shape,
            data: payload.to_vec(),
        },
    })
}

pub fn write_tensor(t: &TensorData, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorData> {
    decode_tensor(fs::File::open(path)?)
}

pub fn write_label_map(m: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_tensor(&TensorData::from(m), path)
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    match read_tensor(path)? {
        TensorData::U8 { shape, data } => match shape.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => LabelMap::new(*h, *w, data),
            _ => Err(dim_err!("label file has shape {shape:?}")),
        },
        other => LabelMap::from_tensor(&other.into_tensor::<f64>()?),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub spacing: [f64; 2],
    pub phase: Phase,
}

/// Dataset index; relative paths resolve against the index file's directory.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(Error::Validation(format!("duplicate case id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries: Vec<IndexEntry> = serde_json::from_slice(&fs::read(path)?)?;
        let index = Self {
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        index.validate()?;
        for e in &index.entries {
            for p in [&e.image_path, &e.label_path] {
                if !index.resolve(p).is_file() {
                    return Err(Error::Validation(format!("case {}: missing file {}", e.id, p.display())));
                }
            }
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(&self.entries)?)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_case<T: Scalar>(&self, entry: &IndexEntry) -> Result<Case<T>> {
        let image = read_tensor(self.resolve(&entry.image_path))?.into_tensor::<T>()?;
        let label = read_label_map(self.resolve(&entry.label_path))?.with_spacing(entry.spacing)?;
        let image = image.reshape(&[1, 1, label.height, label.width])?;
        Ok(Case {
            id: entry.id.clone(),
            image,
            label,
            phase: entry.phase,
        })
    }

    pub fn load_all<T: Scalar>(&self) -> Result<Vec<Case<T>>> {
        self.entries.iter().map(|e| self.load_case(e)).collect()
    }
}

/// One image with its labels; `image` is `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Case<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub label: LabelMap,
    pub phase: Phase,
}
