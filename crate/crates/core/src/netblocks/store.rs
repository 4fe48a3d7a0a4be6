//! Named parameter storage with checkpoint persistence.
//!
//! Checkpoint layout (`XCK1`, little-endian): u32 count; per entry u16 name
//! length, UTF-8 name, u8 rank, u32 dims[rank], f32 data; then u64 step and
//! the 16-byte RNG state (u64 key, u64 counter). Entries serialize in
//! insertion order, so save/load round-trips are bit-exact.

use crate::autodiff::{Scalar, Tensor};
use crate::rng::CounterRng;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CKPT_MAGIC: &[u8; 4] = b"XCK1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("parameter `{0}` already defined with a different shape")]
    ShapeConflict(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing parameter group `{0}` in checkpoint")]
    MissingGroup(&'static str),
}

/// Handle to one named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PId(pub usize);

/// Weight initialization family.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// He-style fan-in scaling: N(0, sqrt(2 / fan_in)).
    HeFanIn(usize),
    /// Plain Gaussian with the given standard deviation.
    Normal(f64),
}

/// Insertion-ordered named tensors plus the training step counter and the
/// persisted RNG stream.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    pub step: u64,
    pub rng: CounterRng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(rng: CounterRng) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            step: 0,
            rng,
        }
    }

    /// Defines a parameter, drawing fresh values from `init_rng` unless an
    /// entry with this name already exists (checkpoint reload), in which
    /// case the stored tensor is kept.
    pub fn def(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        init_rng: &mut CounterRng,
    ) -> PId {
        if let Some(&i) = self.index.get(name) {
            assert_eq!(
                self.tensors[i].shape(),
                shape,
                "parameter {name} redefined with a different shape"
            );
            return PId(i);
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::ZERO; n],
            Init::Ones => vec![T::ONE; n],
            Init::HeFanIn(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64(init_rng.normal() * std))
                    .collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| T::from_f64(init_rng.normal() * std))
                .collect(),
        };
        self.insert(name.to_string(), Tensor::from_vec(shape, data))
    }

    fn insert(&mut self, name: String, t: Tensor<T>) -> PId {
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        PId(id)
    }

    pub fn lookup(&self, name: &str) -> Option<PId> {
        self.index.get(name).map(|&i| PId(i))
    }

    pub fn get(&self, id: PId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: PId, t: Tensor<T>) {
        assert_eq!(t.shape(), self.tensors[id.0].shape(), "shape is immutable");
        self.tensors[id.0] = t;
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = PId> + '_ {
        (0..self.names.len()).map(PId)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.names.iter().any(|n| n.starts_with(prefix))
    }

    /// Total scalar count of model parameters (optimizer state excluded).
    pub fn model_param_count(&self) -> usize {
        self.ids()
            .filter(|&id| !self.name(id).starts_with("opt."))
            .map(|id| self.get(id).numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
            step: self.step,
            rng: self.rng.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(self.names.len() as u32)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let bytes = name.as_bytes();
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            w.write_u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v.to_f64() as f32)?;
            }
        }
        w.write_u64::<LittleEndian>(self.step)?;
        let (key, counter) = self.rng.state();
        w.write_u64::<LittleEndian>(key)?;
        w.write_u64::<LittleEndian>(counter)?;
        w.flush()?;
        Ok(())
    }
}

impl ParamStore<f32> {
    pub fn load(path: &Path) -> Result<Self, NetError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(NetError::CorruptCheckpoint(format!(
                "bad magic {magic:?}"
            )));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count > 1_000_000 {
            return Err(NetError::CorruptCheckpoint(format!(
                "implausible entry count {count}"
            )));
        }
        let mut store = ParamStore::new(CounterRng::new(0));
        for _ in 0..count {
            let nlen = r.read_u16::<LittleEndian>()? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf)?;
            let name = String::from_utf8(nbuf)
                .map_err(|e| NetError::CorruptCheckpoint(format!("bad name: {e}")))?;
            let rank = r.read_u8()? as usize;
            if rank > 8 {
                return Err(NetError::CorruptCheckpoint(format!(
                    "implausible rank {rank} for {name}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            if n > 100_000_000 {
                return Err(NetError::CorruptCheckpoint(format!(
                    "implausible size {n} for {name}"
                )));
            }
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            if store.index.contains_key(&name) {
                return Err(NetError::CorruptCheckpoint(format!(
                    "duplicate entry {name}"
                )));
            }
            store.insert(name, Tensor::from_vec(&shape, data));
        }
        store.step = r.read_u64::<LittleEndian>()?;
        let key = r.read_u64::<LittleEndian>()?;
        let counter = r.read_u64::<LittleEndian>()?;
        store.rng = CounterRng::from_state(key, counter);
        Ok(store)
    }
}
