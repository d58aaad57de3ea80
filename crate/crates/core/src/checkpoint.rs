//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    16 bytes  "SGDFUSE-CKPT\0\0\0\0"
//! version  u32       FORMAT_VERSION
//! count    u32       number of entries
//! entry*   u32 name length, name (UTF-8), u64 blob length, blob
//! ```
//!
//! Entry names are namespaced: `meta/<key>` blobs are UTF-8 text,
//! `param/<name>` and `adam/{m,v}/<name>` blobs are tensors encoded as
//! `u8 dtype (0 = f32, 1 = f64), u32 rank, u64 dims[rank], raw values`.
//! Entries are written in sorted name order so identical state gives
//! identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamStore};

pub const MAGIC: &[u8; 16] = b"SGDFUSE-CKPT\0\0\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    Stage1,
    Stage2,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(StageTag::Stage1),
            "stage2" => Ok(StageTag::Stage2),
            other => Err(Error::checkpoint(format!("unknown stage tag {other:?}"))),
        }
    }
}

/// Everything needed to resume a run or to run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: StageTag,
    pub config: RunConfig,
    /// Optimizer steps completed.
    pub step: u64,
    /// Run seed; per-step randomness is derived from `(seed, step)`.
    pub seed: u64,
    pub best_loss: f64,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(
        stage: StageTag,
        config: &RunConfig,
        step: u64,
        best_loss: f64,
        store: &ParamStore,
        adam: Option<AdamState>,
    ) -> Result<Self> {
        let params = store
            .vars()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            version: FORMAT_VERSION,
            stage,
            config: config.clone(),
            step,
            seed: config.seed,
            best_loss,
            params,
            adam,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut meta = |k: &str, v: String| entries.insert(format!("meta/{k}"), v.into_bytes());
        meta("stage", self.stage.as_str().into());
        meta("config", self.config.to_toml());
        meta("step", self.step.to_string());
        meta("seed", self.seed.to_string());
        meta("best_loss", format!("{:e}", self.best_loss));
        for (k, t) in &self.params {
            entries.insert(format!("param/{k}"), encode_tensor(t)?);
        }
        if let Some(a) = &self.adam {
            entries.insert("meta/adam_step".into(), a.step.to_string().into_bytes());
            for (k, t) in &a.m {
                entries.insert(format!("adam/m/{k}"), encode_tensor(t)?);
            }
            for (k, t) in &a.v {
                entries.insert(format!("adam/v/{k}"), encode_tensor(t)?);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, blob) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(16)? != MAGIC {
            return Err(Error::checkpoint("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut meta = BTreeMap::new();
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::checkpoint("entry name is not UTF-8"))?
                .to_string();
            let len = usize::try_from(r.u64()?).map_err(|_| Error::checkpoint("oversized entry"))?;
            let blob = r.take(len)?;
            if let Some(k) = name.strip_prefix("meta/") {
                let text = String::from_utf8(blob.to_vec())
                    .map_err(|_| Error::checkpoint(format!("{name} is not UTF-8")))?;
                meta.insert(k.to_string(), text);
            } else if let Some(k) = name.strip_prefix("param/") {
                params.insert(k.to_string(), decode_tensor(blob, &name)?);
            } else if let Some(k) = name.strip_prefix("adam/m/") {
                m.insert(k.to_string(), decode_tensor(blob, &name)?);
            } else if let Some(k) = name.strip_prefix("adam/v/") {
                v.insert(k.to_string(), decode_tensor(blob, &name)?);
            } else {
                return Err(Error::checkpoint(format!("unknown entry {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint("trailing bytes after the entry table"));
        }
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::checkpoint(format!("missing meta/{k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::checkpoint(format!("meta/{k} is not an integer")))
        };
        let config = RunConfig::from_toml(get("config")?)
            .map_err(|e| Error::checkpoint(format!("embedded config: {e}")))?;
        let adam = match meta.get("adam_step") {
            Some(_) => Some(AdamState {
                step: num("adam_step")?,
                m,
                v,
            }),
            None => None,
        };
        Ok(Checkpoint {
            version,
            stage: StageTag::parse(get("stage")?)?,
            config,
            step: num("step")?,
            seed: num("seed")?,
            best_loss: get("best_loss")?
                .parse()
                .map_err(|_| Error::checkpoint("meta/best_loss is not a number"))?,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Every mismatch between the stored parameters and a freshly built
    /// model's store.
    pub fn mismatches(&self, store: &ParamStore) -> Vec<String> {
        let expected = store.shapes();
        let mut out = Vec::new();
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => out.push(format!("missing parameter {name}")),
                Some(t) if t.dims() != shape.as_slice() => out.push(format!(
                    "parameter {name}: checkpoint {:?}, model {shape:?}",
                    t.dims()
                )),
                Some(_) => {}
            }
        }
        for name in self.params.keys() {
            if !expected.contains_key(name) {
                out.push(format!("unexpected parameter {name}"));
            }
        }
        out
    }

    /// Copy the stored parameters into `store`, failing with the full list
    /// of mismatches.
    pub fn load_into(&self, store: &ParamStore, stage: StageTag) -> Result<()> {
        let mut problems = Vec::new();
        if self.stage != stage {
            problems.push(format!(
                "checkpoint is {}, expected {}",
                self.stage.as_str(),
                stage.as_str()
            ));
        }
        problems.extend(self.mismatches(store));
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems));
        }
        for (name, t) in &self.params {
            store.set(name, t)?;
        }
        Ok(())
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let (tag, data): (u8, Vec<u8>) = match t.dtype() {
        DType::F32 => (
            0,
            t.flatten_all()?.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            1,
            t.flatten_all()?.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        other => return Err(Error::checkpoint(format!("cannot store dtype {other:?}"))),
    };
    out.push(tag);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for d in t.dims() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    out.extend_from_slice(&data);
    Ok(out)
}

fn decode_tensor(blob: &[u8], name: &str) -> Result<Tensor> {
    let bad = || Error::checkpoint(format!("{name}: malformed tensor blob"));
    let mut r = Reader { buf: blob, pos: 0 };
    let tag = r.take(1).map_err(|_| bad())?[0];
    let rank = r.u32().map_err(|_| bad())? as usize;
    let dims = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()
        .map_err(|_| bad())?;
    let n: usize = dims.iter().product();
    let rest = &blob[r.pos..];
    let dev = Device::Cpu;
    let t = match tag {
        0 if rest.len() == 4 * n => {
            let v: Vec<f32> = rest
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, dims, &dev)?
        }
        1 if rest.len() == 8 * n => {
            let v: Vec<f64> = rest
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, dims, &dev)?
        }
        _ => return Err(bad()),
    };
    Ok(t)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::checkpoint("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Adam, Init};

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(DType::F32, seed);
        s.get("a.weight", &[3, 2], Init::Fan { fan_in: 2, gain: 1.0 }).unwrap();
        s.get("b.bias", &[4], Init::Zeros).unwrap();
        s
    }

    #[test]
    fn round_trip_bitwise() {
        let s = store(1);
        let x = s.var("a.weight").unwrap().as_tensor().sqr().unwrap().sum_all().unwrap();
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        adam.step(&s, &x.backward().unwrap()).unwrap();
        let ck = Checkpoint::new(StageTag::Stage1, &RunConfig::default(), 1, 0.25, &s, Some(adam.state())).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..16], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.step, 1);
        assert_eq!(back.best_loss, 0.25);
        assert_eq!(back.adam.as_ref().unwrap().m.len(), 1);
        let fresh = store(2);
        back.load_into(&fresh, StageTag::Stage1).unwrap();
        for (k, v) in s.vars() {
            let a = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = fresh.var(k).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mismatches_are_listed() {
        let ck = Checkpoint::new(StageTag::Stage1, &RunConfig::default(), 0, 0.0, &store(1), None).unwrap();
        let mut other = ParamStore::new(DType::F32, 0);
        other.get("a.weight", &[2, 2], Init::Zeros).unwrap();
        other.get("c.bias", &[4], Init::Zeros).unwrap();
        match ck.load_into(&other, StageTag::Stage2) {
            Err(Error::Checkpoint(list)) => assert_eq!(list.len(), 4, "{list:?}"),
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = Checkpoint::new(StageTag::Stage2, &RunConfig::default(), 3, 1.0, &store(1), None)
            .unwrap()
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[16] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
