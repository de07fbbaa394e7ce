//! Named parameter tensors and their on-disk container.
//!
//! Container layout (little endian):
//!
//! ```text
//! magic   b"MCNPARAM"
//! version u32            (currently 1)
//! meta    u32 len + UTF-8 JSON document
//! count   u32
//! entry*  u32 name len, name bytes, u32 ndim, u64 dims[ndim], f64 payload[prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const CONTAINER_MAGIC: &[u8; 8] = b"MCNPARAM";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph handles for every parameter of a [`ParamStore`] in one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not part of this model"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Weight drawn uniformly from `[-a, a]`, `a = sqrt(1 / fan_in)`.
    pub fn init_weight<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let a = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("valid weight shape"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t)))
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients the graph holds for `bound` into each tensor's grad.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams, scale: f64) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(grad) = bound.vars.get(name).and_then(|&v| g.grad(v)) {
                if scale == 1.0 {
                    t.accumulate_grad(grad);
                } else {
                    let scaled: Vec<f64> = grad.iter().map(|x| x * scale).collect();
                    t.accumulate_grad(&scaled);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn write_container<W: Write>(&self, mut w: W, meta: &serde_json::Value) -> std::io::Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_u32::<LittleEndian>(CONTAINER_VERSION)?;
        let meta = serde_json::to_vec(meta)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in t.data() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_container<R: Read>(mut r: R) -> Result<(Self, serde_json::Value)> {
        let bad = |reason: String| Error::Format {
            what: "parameter container",
            reason,
        };
        let io = |e: std::io::Error| bad(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CONTAINER_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CONTAINER_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(io)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| bad(e.to_string()))?;
        let count = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            store.insert(&name, Tensor::new(shape, data)?);
        }
        Ok((store, meta))
    }
}
