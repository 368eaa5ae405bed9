//! `DSGT` checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! b"DSGT"  u32 version  u32 entry_count
//! per entry: u32 name_len, name (UTF-8), u32 ndims, ndims × u32 dims, f32 data
//! ```
//!
//! Entries are sorted by name. Model parameters use their dotted names;
//! optimizer momentum is stored under `opt/velocity/<name>` and the step
//! counter as the one-element `opt/iter` (exact up to 2^24).

use std::collections::BTreeMap;
use std::path::Path;

use docsegtr_core::params::ParamStore;
use docsegtr_core::training::OptimizerState;
use docsegtr_core::{Error, Tensor};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"DSGT";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "opt/velocity/";
const ITER_ENTRY: &str = "opt/iter";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// Named `f32` tensors, unique by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    /// Parameters plus, when given, optimizer velocity and step counter.
    pub fn from_state(params: &ParamStore, opt: Option<&OptimizerState>) -> Self {
        let mut entries = BTreeMap::new();
        for (name, t) in params.iter() {
            entries.insert(
                name.to_string(),
                Entry {
                    dims: t.shape().iter().map(|&d| d as u32).collect(),
                    data: t.data().iter().map(|&x| x as f32).collect(),
                },
            );
        }
        if let Some(opt) = opt {
            for (name, v) in &opt.velocity {
                let dims = params.get(name).map_or_else(
                    || vec![v.len() as u32],
                    |t| t.shape().iter().map(|&d| d as u32).collect(),
                );
                entries.insert(
                    format!("{VELOCITY_PREFIX}{name}"),
                    Entry {
                        dims,
                        data: v.iter().map(|&x| x as f32).collect(),
                    },
                );
            }
            entries.insert(
                ITER_ENTRY.to_string(),
                Entry {
                    dims: vec![1],
                    data: vec![opt.iter as f32],
                },
            );
        }
        Self { entries }
    }

    /// Model parameters, checked against the names and shapes of `reference`.
    pub fn params(&self, reference: &ParamStore) -> AppResult<ParamStore> {
        let mut store = ParamStore::new();
        for (name, e) in self.entries.iter().filter(|(n, _)| !n.starts_with("opt/")) {
            let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
            let data = e.data.iter().map(|&x| f64::from(x)).collect();
            store.insert(name.clone(), Tensor::new(&dims, data)?);
        }
        reference.check_compatible(&store)?;
        Ok(store)
    }

    /// Restores velocity and step counter into `opt`; false when the
    /// checkpoint carries no optimizer state.
    pub fn restore_optimizer(
        &self,
        params: &ParamStore,
        opt: &mut OptimizerState,
    ) -> AppResult<bool> {
        let Some(iter) = self.entries.get(ITER_ENTRY) else {
            return Ok(false);
        };
        opt.iter = iter.data.first().copied().unwrap_or(0.0) as u64;
        opt.velocity.clear();
        for (name, e) in &self.entries {
            let Some(pname) = name.strip_prefix(VELOCITY_PREFIX) else {
                continue;
            };
            match params.get(pname) {
                Some(t) if t.numel() == e.data.len() => {
                    opt.velocity.insert(
                        pname.to_string(),
                        e.data.iter().map(|&x| f64::from(x)).collect(),
                    );
                }
                _ => {
                    return Err(Error::ParamMismatch {
                        missing: vec![],
                        extra: vec![name.clone()],
                        mismatched: vec![],
                    }
                    .into())
                }
            }
        }
        Ok(true)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a DSGT checkpoint".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "entry name is not UTF-8")?;
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
                .ok_or("entry size overflows")?;
            let raw = r.take(numel.checked_mul(4).ok_or("entry size overflows")?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            if entries.insert(name.clone(), Entry { dims, data }).is_some() {
                return Err(format!("duplicate entry {name}"));
            }
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.encode()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::decode(&bytes).map_err(|m| AppError::format(path, m))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0));
        s.insert("b", Tensor::full(&[1], 0.1));
        s
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let s = store();
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0, 0, vec![]);
        opt.iter = 7;
        opt.velocity.insert("a.w".into(), vec![0.25; 6]);
        opt.velocity.insert("b".into(), vec![-1.0]);
        let bytes = Checkpoint::from_state(&s, Some(&opt)).encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let p = back.params(&s).unwrap();
        assert_eq!(p.get("a.w"), s.get("a.w"));
        let mut opt2 = OptimizerState::new(0.1, 0.9, 0.0, 0, vec![]);
        assert!(back.restore_optimizer(&p, &mut opt2).unwrap());
        assert_eq!(opt2.iter, 7);
        assert_eq!(opt2.velocity, opt.velocity);
    }

    #[test]
    fn mismatch_lists_names() {
        let ck = Checkpoint::from_state(&store(), None);
        let mut other = ParamStore::new();
        other.insert("a.w", Tensor::zeros(&[3, 2]));
        other.insert("c", Tensor::zeros(&[1]));
        let err = ck.params(&other).unwrap_err().to_string();
        assert!(
            err.contains("\"c\"") && err.contains("\"b\"") && err.contains("\"a.w\""),
            "{err}"
        );
    }

    #[test]
    fn corrupt_bytes() {
        let bytes = Checkpoint::from_state(&store(), None).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
