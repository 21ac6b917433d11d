use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named gradients, keyed like the [`ParamSet`] they belong to.
pub type GradMap = BTreeMap<String, Tensor>;

/// Named learnable tensors. Iteration order is the sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if !t.is_finite() {
            return Err(Error::NonFinite { op: format!("init {name}") });
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
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

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Merges another set in; fails on a name clash.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Places every tensor on the graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.input(v.clone())))
            .collect();
        Bindings { vars }
    }

    /// Binds every tensor as a constant; nothing receives a gradient.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        Bindings { vars }
    }

    /// Writes the binary checkpoint container.
    ///
    /// Layout (little endian): magic `TPNCKPT\0`, u32 version, u32 count,
    /// then per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims,
    /// row-major f64 payload.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        fn bad(msg: &str) -> Error {
            Error::Input(format!("corrupt checkpoint: {msg}"))
        }
        fn read_n<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
            Ok(buf)
        }
        let magic: [u8; 8] = read_n(&mut r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(read_n(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(read_n(&mut r)?);
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_n(&mut r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            let rank = u32::from_le_bytes(read_n(&mut r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(read_n(&mut r)?) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_n(&mut r)?));
            }
            set.insert(name, Tensor::new(shape, data))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TPNCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Graph handles for every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Handle for a parameter. Panics on an unknown name, which is a
    /// programming error rather than a data error.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects adjoints for every bound tensor, substituting zeros for
    /// tensors the loss never touched.
    pub fn collect(&self, g: &Graph, grads: &super::graph::Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (k.clone(), t)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]))
            .unwrap();
        p.insert("b", Tensor::row(vec![0.5])).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"TPNCKPT\0");
        let q = ParamSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_duplicates_and_corruption() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::row(vec![1.0])).unwrap();
        assert!(p.insert("x", Tensor::row(vec![2.0])).is_err());
        assert!(ParamSet::read_from(&b"NOTACKPT"[..]).is_err());
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamSet::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_non_finite_init() {
        let mut p = ParamSet::new();
        assert!(p.insert("x", Tensor::row(vec![f64::NAN])).is_err());
    }
}
