use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NnError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const BLOB_MAGIC: &[u8; 4] = b"LBPT";
const BLOB_VERSION: u32 = 1;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    /// Append a tensor and return its slot index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Put every tensor on the graph. With `trainable = false` the parameters
    /// still participate in back-propagation towards upstream inputs but do
    /// not receive gradients themselves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Gradients for each slot, zero-filled where the graph produced none.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Little-endian blob: magic, version, dtype tag, then per tensor its
    /// name, rank, dims and values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.n_scalars() * T::BYTES);
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != BLOB_MAGIC {
            return Err(NnError::Blob("bad magic".into()));
        }
        let version = r.u32()?;
        if version != BLOB_VERSION {
            return Err(NnError::Blob(format!("unsupported blob version {version}")));
        }
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| NnError::Blob(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(NnError::Blob(format!(
                "blob holds {} values, expected {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let count = r.u32()? as usize;
        let mut set = Self::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| NnError::Blob("non-utf8 tensor name".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            set.push(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(NnError::Blob("trailing bytes".into()));
        }
        Ok(set)
    }

    /// Same names and shapes, values ignored.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }
}

/// Graph handles for a bound [`ParamSet`], in slot order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Blob("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Deterministic Gaussian initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("non-negative std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}
