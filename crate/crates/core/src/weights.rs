//! Named parameter maps and the binary weight-file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    b"FEB1"
//! version  u8 (= 1)
//! count    u32
//! count x { name_len u32, name utf-8, dtype u8 (0 = f32), rank u8, dims u32 x rank }
//! payload  f32 values of every tensor, in header order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"FEB1";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered map from parameter name to tensor. Names are dotted paths whose
/// first segment is the owning component (`encoder`, `head`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamMap<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamMap<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn byte_len(&self) -> u64 {
        self.tensors.values().map(Tensor::byte_len).sum()
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        for t in self.tensors.values_mut() {
            t.set_requires_grad(requires_grad);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamMap<U> {
        ParamMap {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Moves every entry of `other` into this map; fails on a name clash.
    pub fn merge(&mut self, other: ParamMap<T>) -> Result<()> {
        for (name, t) in other.tensors {
            if self.tensors.contains_key(&name) {
                return Err(Error::WeightMismatch(format!("duplicate parameter {name}")));
            }
            self.tensors.insert(name, t);
        }
        Ok(())
    }

    /// Splits off the entries whose name starts with `prefix`.
    pub fn split_prefix(&mut self, prefix: &str) -> ParamMap<T> {
        let names: Vec<String> = self.tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let mut out = ParamMap::new();
        for n in names {
            let t = self.tensors.remove(&n).expect("name listed above");
            out.tensors.insert(n, t);
        }
        out
    }

    /// Registers every tensor on `tape` as a parameter leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, group: &'static str) -> Bound {
        Bound {
            group,
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v, group)))
                .collect(),
        }
    }

    /// Checks names and shapes against an expected list; no extras allowed.
    pub fn validate_against(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            match self.tensors.get(name) {
                None => return Err(Error::WeightMismatch(format!("missing {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::WeightMismatch(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != expected.len() {
            let extra: Vec<&str> = self.names().filter(|n| !expected.iter().any(|(e, _)| e == n)).collect();
            return Err(Error::WeightMismatch(format!("unexpected {extra:?}")));
        }
        Ok(())
    }
}

/// Tape handles for a [`ParamMap`] registered with [`ParamMap::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    group: &'static str,
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for tensors already on a tape, e.g. leaves of a gradient check.
    pub fn new(group: &'static str, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            group,
            vars: vars.into_iter().collect(),
        }
    }

    pub fn group(&self) -> &'static str {
        self.group
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::WeightMismatch(format!("missing {name}")))
    }

    /// Takes this binding's entries out of `grads`, keyed by parameter name.
    pub fn take_grads<T>(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.remove(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

pub fn write_weights(params: &ParamMap<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.byte_len() as usize);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let rank =
            u8::try_from(t.rank()).map_err(|_| Error::WeightFormat(format!("{name}: rank {} too large", t.rank())))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::WeightFormat(format!("{name}: dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::WeightFormat(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_weights(buf: &[u8]) -> Result<ParamMap<f32>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = cur.u32("entry count")? as usize;
    let mut header = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::WeightFormat(format!("entry {i}: name is not utf-8")))?
            .to_string();
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::WeightFormat(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        header.push((name, shape));
    }
    let declared: usize = header.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
    let remaining = buf.len() - cur.pos;
    if declared != remaining {
        return Err(Error::WeightFormat(format!(
            "header declares {declared} payload bytes, file holds {remaining}"
        )));
    }
    let mut params = ParamMap::new();
    for (name, shape) in header {
        let n: usize = shape.iter().product();
        let bytes = cur.take(n * 4, "payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::WeightFormat(format!("{name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::WeightFormat(format!("duplicate entry {name}")));
        }
    }
    Ok(params)
}

pub fn save_weights(params: &ParamMap<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_weights(params)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamMap<f32>> {
    read_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamMap<f32> {
        let mut p = ParamMap::new();
        p.insert(
            "encoder.a",
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap(),
        );
        p.insert("head.b", Tensor::vector(vec![7.0]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let p = sample();
        let bytes = write_weights(&p).unwrap();
        let back = read_weights(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(write_weights(&back).unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.feb");
        save_weights(&p, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), p);
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let bytes = write_weights(&sample()).unwrap();
        for cut in [0, 3, 5, 9, 20, bytes.len() - 1] {
            let err = read_weights(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::WeightFormat(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_weights(&sample()).unwrap();
        bytes[4] = 9;
        assert!(read_weights(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(read_weights(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn header_shape_must_match_payload() {
        let mut bytes = write_weights(&sample()).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(read_weights(&bytes).unwrap_err().to_string().contains("payload"));
    }

    #[test]
    fn validation_reports_missing_extra_and_shape() {
        let p = sample();
        let ok = vec![("encoder.a".to_string(), vec![2, 3]), ("head.b".to_string(), vec![1])];
        p.validate_against(&ok).unwrap();
        assert!(p.validate_against(&ok[..1]).is_err());
        let bad = vec![("encoder.a".to_string(), vec![3, 2]), ("head.b".to_string(), vec![1])];
        assert!(p.validate_against(&bad).is_err());
    }
}
