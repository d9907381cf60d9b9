//! Named parameter tensors and the `MFOF` weight file.
//!
//! File layout (all integers little-endian `u32`, payload little-endian `f32`):
//! magic `b"MFOF"`, version, tensor count, then for each tensor: name length,
//! UTF-8 name, rank, dims, row-major payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensors::Tensor;

pub const MAGIC: &[u8; 4] = b"MFOF";
pub const VERSION: u32 = 1;

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Gaussian with std `gain / sqrt(fan_in)`; fan-in is the product of all dims but the first.
    Scaled { gain: f32 },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Default)]
pub struct Weights {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeded initialisation of every spec, drawn in spec order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::new();
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Scaled { gain } => {
                    let fan_in: usize = spec.shape[1..].iter().product::<usize>().max(1);
                    let std = gain / (fan_in as f32).sqrt();
                    Tensor::from_fn(&spec.shape, |_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                }
            };
            w.insert(&spec.name, t);
        }
        w
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.get(name).ok_or_else(|| Error::Param(format!("missing weight tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Fails unless every spec is present with the expected shape.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.require(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Param(format!(
                    "weight `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &Weights) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad weight file magic {magic:?}")));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let count = read_u32(&mut input)?;
        let mut w = Weights::new();
        for _ in 0..count {
            let len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut input, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut input)? as usize;
            let shape = (0..rank).map(|_| read_u32(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            read_exact(&mut input, &mut bytes)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            w.insert(&name, Tensor::new(shape, data)?);
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Length("weight file ends early".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec { name: "a.w".into(), shape: vec![4, 3, 3, 3], init: Init::Scaled { gain: 1.0 } },
            ParamSpec { name: "a.b".into(), shape: vec![4], init: Init::Zeros },
        ]
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Weights::init(&specs(), 42);
        let b = Weights::init(&specs(), 42);
        let c = Weights::init(&specs(), 43);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
        assert!(a.require("a.b").unwrap().data().iter().all(|&v| v == 0.0));
        a.check_specs(&specs()).unwrap();
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let w = Weights::init(&specs(), 7);
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MFOF");
        let r = Weights::read_from(buf.as_slice()).unwrap();
        assert!(w.bitwise_eq(&r));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let w = Weights::init(&specs(), 7);
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Weights::read_from(bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(Weights::read_from(buf.as_slice()), Err(Error::Length(_))));
    }

    #[test]
    fn shape_check_reports_mismatch() {
        let mut w = Weights::init(&specs(), 1);
        w.insert("a.b", Tensor::zeros(&[5]));
        assert!(w.check_specs(&specs()).is_err());
    }
}
