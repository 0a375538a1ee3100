//! Named parameter tensors and the binary checkpoint format.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! b"MNASPARM" | version: u32 LE | manifest length: u64 LE | manifest JSON | data: f64 LE ...
//! ```
//!
//! The manifest lists `{name, shape}` in storage order; data is the
//! concatenation of all tensors in row-major order.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MNASPARM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trailing dimension (row length) for row lookups.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

pub type ParamId = usize;

/// A flat `f64` buffer partitioned into named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    specs: Vec<TensorSpec>,
    index: HashMap<String, ParamId>,
    pub data: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error("checkpoint layout does not match: {0}")]
    Layout(String),
}

impl ParamSet {
    pub fn new(layout: impl IntoIterator<Item = (String, Vec<usize>)>) -> Self {
        let mut specs = Vec::new();
        let mut index = HashMap::new();
        let mut offset = 0;
        for (name, shape) in layout {
            let spec = TensorSpec { name: name.clone(), shape, offset };
            offset += spec.len();
            let previous = index.insert(name, specs.len());
            assert!(previous.is_none(), "duplicate tensor name");
            specs.push(spec);
        }
        ParamSet { specs, index, data: vec![0.0; offset] }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn spec(&self, id: ParamId) -> &TensorSpec {
        &self.specs[id]
    }

    pub fn tensor(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = &self.specs[self.id(name)?];
        Some(&mut self.data[s.offset..s.offset + s.len()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// A zero buffer with the same layout.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet { specs: self.specs.clone(), index: self.index.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn fill_uniform(&mut self, rng: &mut impl Rng, scale: f64) {
        for v in &mut self.data {
            *v = rng.random_range(-scale..=scale);
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.specs == other.specs
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let manifest = serde_json::to_vec(&self.specs).expect("manifest serializes");
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<ParamSet, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest)?;
        let specs: Vec<TensorSpec> =
            serde_json::from_slice(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut set = ParamSet::new(specs.into_iter().map(|s| (s.name, s.shape)));
        let mut bytes = vec![0u8; set.data.len() * 8];
        r.read_exact(&mut bytes)?;
        for (v, chunk) in set.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Manifest("trailing bytes after tensor data".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<ParamSet, CheckpointError> {
        ParamSet::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn assign(&mut self, other: &ParamSet) -> Result<(), CheckpointError> {
        if !self.same_layout(other) {
            return Err(CheckpointError::Layout("tensor names or shapes differ".into()));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_set() -> ParamSet {
        let mut p = ParamSet::new([("a".to_string(), vec![2, 3]), ("b".to_string(), vec![4])]);
        p.fill_uniform(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1), 0.1);
        p
    }

    #[test]
    fn layout_and_lookup() {
        let p = sample_set();
        assert_eq!(p.len(), 10);
        assert_eq!(p.get("b").unwrap().len(), 4);
        assert_eq!(p.spec(p.id("b").unwrap()).offset, 6);
        assert!(p.data.iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn checkpoint_is_bit_exact() {
        let mut p = sample_set();
        p.data[3] = f64::MIN_POSITIVE;
        p.data[4] = -0.0;
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ParamSet::read_from(buf.as_slice()).unwrap();
        assert!(p.same_layout(&q));
        assert!(p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = sample_set();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(ParamSet::read_from(bad.as_slice()), Err(CheckpointError::BadMagic)));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(ParamSet::read_from(bad.as_slice()), Err(CheckpointError::Version(9))));
        assert!(ParamSet::read_from(&buf[..buf.len() - 1]).is_err());
    }
}
