use std::collections::HashMap;
use std::path::Path;

use super::{numel, Real, Shape};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EOMC";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Shape,
    pub value: Vec<T>,
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Shape, value: Vec<T>) -> Result<usize> {
        let name = name.into();
        if value.len() != numel(&shape) {
            return Err(Error::Shape(format!("{name}: {} values for shape {shape:?}", value.len())));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, shape, value });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.position(name).map(|i| &mut self.params[i])
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Trainable parameters, non-trainable buffers and a JSON metadata blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    pub meta: String,
}

fn dtype_tag<T: Real>() -> u8 {
    if std::mem::size_of::<T>() == 4 {
        0
    } else {
        1
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        let count = self.params.len() + self.buffers.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let tables = [("param/", &self.params), ("buffer/", &self.buffers)];
        for (prefix, table) in tables {
            for p in table.iter() {
                let name = format!("{prefix}{}", p.name);
                out.extend_from_slice(&(name.len() as u16).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.push(4);
                for d in p.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                out.push(dtype_tag::<T>());
                for &v in &p.value {
                    if dtype_tag::<T>() == 0 {
                        out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
                    } else {
                        out.extend_from_slice(&v.as_f64().to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Decodes either dtype, converting values to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| Error::Config("checkpoint metadata is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Config("checkpoint entry name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            if ndim > 4 {
                return Err(Error::Shape(format!("{name}: {ndim} dimensions")));
            }
            let mut shape = [1usize; 4];
            for d in shape.iter_mut().skip(4 - ndim) {
                *d = r.u32()? as usize;
            }
            let n = numel(&shape);
            let values: Vec<T> = match r.take(1)?[0] {
                0 => r.take(n * 4)?.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
                1 => r.take(n * 8)?.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
                _ => return Err(Error::DType { expected: "f32 or f64", found: "unknown" }),
            };
            if let Some(rest) = name.strip_prefix("param/") {
                params.insert(rest, shape, values)?;
            } else if let Some(rest) = name.strip_prefix("buffer/") {
                buffers.insert(rest, shape, values)?;
            } else {
                return Err(Error::Config(format!("unknown checkpoint table for `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Config(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { params, buffers, meta })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated { expected: end, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    crate::io::write_atomic(path, &ckpt.to_bytes())
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamStore::new();
        params.insert("enc0.conv1.weight", [4, 5, 3, 3], (0..180).map(|i| i as f32 * 0.01 - 0.7).collect()).unwrap();
        params.insert("head.bias", [1, 1, 1, 1], vec![f32::MIN_POSITIVE]).unwrap();
        let mut buffers = ParamStore::new();
        buffers.insert("enc0.norm1.running_var", [1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        Checkpoint { params, buffers, meta: "{\"depth\":2}".into() }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Version(9))));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", [1, 1, 1, 1], vec![0.0]).unwrap();
        assert!(s.insert("a", [1, 1, 1, 1], vec![0.0]).is_err());
        assert!(s.insert("b", [1, 1, 1, 2], vec![0.0]).is_err());
    }
}
