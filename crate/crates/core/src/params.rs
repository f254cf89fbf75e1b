//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`, floats little-endian `f64`):
//!
//! ```text
//! magic    8 bytes  "SYN2CKPT"
//! version  u32      1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank × u32)
//!   data     product(dims) × f64, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYN2CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        let (k, v) = self.tensors.get_index(i).expect("param index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor {
        self.tensors.get_index_mut(i).expect("param index").1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Glorot-uniform matrix.
    pub fn init_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data));
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], limit: f64, rng: &mut impl Rng) {
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Copies every tensor of `other` whose name exists here, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let src = other.get(name).ok_or_else(|| Error::Parameter {
                name: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if src.shape() != t.shape() {
                return Err(Error::Parameter {
                    name: name.clone(),
                    reason: format!(
                        "shape {:?} in checkpoint, model expects {:?}",
                        src.shape(),
                        t.shape()
                    ),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.num_scalars() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(8, &format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let raw_name = r.take(len)?.to_vec();
            let name =
                String::from_utf8(raw_name).map_err(|_| r.err(at as u64, "name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(name, Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos as u64, "trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Element-wise mean of stores with identical layout.
    pub fn average(stores: &[ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or(Error::Contract("no checkpoints to average".into()))?;
        let mut out = first.clone();
        for s in &stores[1..] {
            for (name, t) in first.iter() {
                let other = s.get(name).ok_or_else(|| Error::Parameter {
                    name: name.to_owned(),
                    reason: "missing in one of the averaged checkpoints".into(),
                })?;
                if other.shape() != t.shape() {
                    return Err(Error::Parameter {
                        name: name.to_owned(),
                        reason: format!("shape {:?} vs {:?}", t.shape(), other.shape()),
                    });
                }
            }
            if s.len() != first.len() {
                let extra = s.names().find(|n| first.get(n).is_none()).unwrap_or("?");
                return Err(Error::Parameter {
                    name: extra.to_owned(),
                    reason: "not present in every averaged checkpoint".into(),
                });
            }
        }
        let k = stores.len() as f64;
        for (i, (name, _)) in first.iter().enumerate() {
            let acc = out.by_index_mut(i);
            let d = acc.data_mut();
            d.fill(0.0);
            for s in stores {
                for (a, b) in d.iter_mut().zip(s.get(name).expect("checked").data()) {
                    *a += b;
                }
            }
            for a in d.iter_mut() {
                *a /= k;
            }
        }
        Ok(out)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl ByteReader<'_> {
    fn err(&self, offset: u64, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.to_owned(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(self.pos as u64, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.init_matrix("enc.w", 3, 4, &mut rng);
        s.init_const("enc.b", &[4], 0.25);
        s.insert("odd", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        s
    }

    #[test]
    fn checkpoint_bytes_round_trip_bit_exact() {
        let s = sample();
        let bytes = s.to_bytes();
        let back = ParamStore::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.same_layout(&s));
    }

    #[test]
    fn checkpoint_rejects_truncation_and_magic() {
        let bytes = sample().to_bytes();
        let err = ParamStore::from_bytes(&bytes[..bytes.len() - 3], Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamStore::from_bytes(&bad, Path::new("m")),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn average_of_two() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::scalar(0.0));
        let mut b = ParamStore::new();
        b.insert("w", Tensor::scalar(2.0));
        let avg = ParamStore::average(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(avg.get("w").unwrap().item(), 1.0);
        let same = ParamStore::average(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same, a);
    }

    #[test]
    fn average_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stores: Vec<ParamStore> = (0..4)
            .map(|_| {
                let mut s = ParamStore::new();
                s.init_matrix("w", 2, 2, &mut rng);
                s
            })
            .collect();
        let fwd = ParamStore::average(&stores).unwrap();
        let mut rev = stores.clone();
        rev.reverse();
        let back = ParamStore::average(&rev).unwrap();
        assert!(fwd.get("w").unwrap().max_abs_diff(back.get("w").unwrap()) < 1e-15);
    }

    #[test]
    fn average_names_mismatched_parameter() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::scalar(0.0));
        let mut b = ParamStore::new();
        b.insert("w", Tensor::vector(vec![0.0, 1.0]));
        match ParamStore::average(&[a, b]) {
            Err(Error::Parameter { name, .. }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
    }
}
