//! Training checkpoints ("VNCK").
//!
//! Layout, all little-endian: magic `VNCK`, `u32` version, `u32` record
//! count, then records `[u32 name_len, name, u32 rank, u32 dims.., f64 data..]`.
//! Record names are prefixed `param/`, `buffer/`, `adam.m/`, `adam.v/` or
//! `train/`. After the records: optimizer `lr, beta1, beta2, eps` as `f64`
//! and `step` as `u64`; the schedule `initial_r, step_every, floor_r,
//! next_epoch` as `u32`; and finally the run configuration text as
//! `u32 len` plus UTF-8 bytes.

use super::optim::{Adam, AdamConfig};
use super::schedule::RFSchedule;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const VNCK_MAGIC: &[u8; 4] = b"VNCK";
pub const VNCK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub adam: Adam,
    pub schedule: RFSchedule,
    /// First epoch a resumed run will execute.
    pub next_epoch: u32,
    /// Scalar bookkeeping such as the best validation loss.
    pub extras: BTreeMap<String, Tensor>,
    pub config_text: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn record(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.str(name)?;
        self.u32(t.rank())?;
        for &d in t.shape() {
            self.u32(d)?;
        }
        t.data().iter().for_each(|&v| self.f64(v));
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > self.bytes.len() / 8 {
            return Err(Error::Format(format!("record `{name}` claims {n} values")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut records: Vec<(String, &Tensor)> = Vec::new();
        records.extend(self.store.params().iter().map(|(k, v)| (format!("param/{k}"), v)));
        records.extend(self.store.buffers().iter().map(|(k, v)| (format!("buffer/{k}"), v)));
        records.extend(self.adam.m.iter().map(|(k, v)| (format!("adam.m/{k}"), v)));
        records.extend(self.adam.v.iter().map(|(k, v)| (format!("adam.v/{k}"), v)));
        records.extend(self.extras.iter().map(|(k, v)| (format!("train/{k}"), v)));
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(VNCK_MAGIC);
        w.u32(VNCK_VERSION as usize)?;
        w.u32(records.len())?;
        for (name, t) in &records {
            w.record(name, t)?;
        }
        let c = self.adam.cfg;
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            w.f64(v);
        }
        w.0.extend_from_slice(&self.adam.step.to_le_bytes());
        let s = self.schedule;
        for v in [s.initial_r, s.step_every, s.floor_r, self.next_epoch as usize] {
            w.u32(v)?;
        }
        w.str(&self.config_text)?;
        Ok(w.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(VNCK_MAGIC.as_slice()) {
            return Err(Error::Format("not a VNCK checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VNCK_VERSION as usize {
            return Err(Error::Format(format!("unsupported VNCK version {version}")));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut extras = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.record()?;
            let (kind, key) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("record `{name}` has no kind prefix")))?;
            let key = key.to_string();
            match kind {
                "param" => store.insert(key, t),
                "buffer" => store.insert_buffer(key, t),
                "adam.m" => {
                    m.insert(key, t);
                }
                "adam.v" => {
                    v.insert(key, t);
                }
                "train" => {
                    extras.insert(key, t);
                }
                _ => return Err(Error::Format(format!("unknown record kind `{kind}`"))),
            }
        }
        let cfg = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let schedule = RFSchedule {
            initial_r: r.u32()?,
            step_every: r.u32()?,
            floor_r: r.u32()?,
        };
        let next_epoch = r.u32()? as u32;
        let config_text = r.str()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            store,
            adam: Adam { cfg, step, m, v },
            schedule,
            next_epoch,
            extras,
            config_text,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extras.get(key).map(|t| t.data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.insert("a.weight", Tensor::new(vec![2, 2], vec![1.0, -0.5, 1e-300, f64::MAX]).unwrap());
        store.insert("b", Tensor::scalar(3.25));
        store.insert_buffer("bn.running_mean", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let mut adam = Adam::new(AdamConfig::full_scale());
        adam.step = 17;
        adam.m.insert("b".into(), Tensor::scalar(0.5));
        adam.v.insert("b".into(), Tensor::scalar(0.25));
        Checkpoint {
            store,
            adam,
            schedule: RFSchedule::full_scale(),
            next_epoch: 42,
            extras: BTreeMap::from([("best_val".to_string(), Tensor::scalar(1.5))]),
            config_text: "model.d_model = 8\n".into(),
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let b = c.encode().unwrap();
        let back = Checkpoint::decode(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), b);
        assert_eq!(&b[..4], b"VNCK");
        assert_eq!(back.extra("best_val"), Some(1.5));
    }

    #[test]
    fn rejects_corruption() {
        let b = sample().encode().unwrap();
        assert!(Checkpoint::decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut magic = b;
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.vnck");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
    }
}
