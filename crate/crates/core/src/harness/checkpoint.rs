//! Binary checkpoints.
//!
//! Layout: magic `MODA`, u32 version, u32 tensor count; per tensor a u16
//! name length and UTF-8 name, u8 dtype (0 = f64, 1 = u64), u8 rank, u64
//! dims and a little-endian payload; then a CRC32 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{MllmModel, Stage};
use crate::tensor::{Moments, OptimizerState, ParamStore, Rng, RngState, Tensor};

use super::config::{RunConfig, StageConfig};

const MAGIC: &[u8; 4] = b"MODA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn push_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.entries.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            payload: Payload::F64(data),
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, data: Vec<u64>) {
        self.entries.push(Entry {
            name: name.into(),
            shape: vec![data.len()],
            payload: Payload::U64(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(Entry {
                shape,
                payload: Payload::F64(d),
                ..
            }) => Ok((shape, d)),
            Some(_) => Err(Error::Format(format!("{name} is not an f64 tensor"))),
            None => Err(Error::Format(format!("checkpoint has no {name}"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Entry {
                payload: Payload::U64(d), ..
            }) => Ok(d),
            Some(_) => Err(Error::Format(format!("{name} is not a u64 tensor"))),
            None => Err(Error::Format(format!("checkpoint has no {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.payload {
                Payload::F64(_) => 0,
                Payload::U64(_) => 1,
            });
            out.push(e.shape.len() as u8);
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F64(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let n = n.filter(|n| n.saturating_mul(8) <= body.len()).ok_or_else(|| Error::Format(format!("{name}: bad shape {shape:?}")))?;
            let payload = match dtype {
                0 => Payload::F64((0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?),
                1 => Payload::U64((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
                d => return Err(Error::Format(format!("{name}: unknown dtype {d}"))),
            };
            entries.push(Entry { name, shape, payload });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn stage_code(stage: Stage) -> u64 {
    match stage {
        Stage::Stage1 => 1,
        Stage::Stage2 => 2,
    }
}

/// Everything needed to resume or evaluate a run.
pub fn training_checkpoint(model: &MllmModel, opt: &OptimizerState, rng: &Rng, stage: Stage, config_hash: u64) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.push_u64("meta.config_hash", vec![config_hash]);
    ck.push_u64("meta.stage", vec![stage_code(stage)]);
    ck.push_u64("meta.step", vec![opt.step]);
    let st = rng.state();
    ck.push_u64("meta.rng", vec![st.seed, st.word_pos as u64, (st.word_pos >> 64) as u64]);
    for (_, name, t) in model.store.iter() {
        ck.push_f64(name, t.shape(), t.data().to_vec());
    }
    for (id, m) in &opt.moments {
        let name = model.store.name(*id);
        let shape = model.store.get(*id).shape();
        ck.push_f64(format!("opt.m/{name}"), shape, m.first.clone());
        ck.push_f64(format!("opt.v/{name}"), shape, m.second.clone());
    }
    ck
}

#[derive(Clone, Debug, PartialEq)]
pub struct Meta {
    pub config_hash: u64,
    pub stage: Stage,
    pub step: u64,
    pub rng: RngState,
}

pub fn read_meta(ck: &Checkpoint) -> Result<Meta> {
    let one = |name: &str| -> Result<u64> {
        match ck.u64s(name)? {
            [v] => Ok(*v),
            _ => Err(Error::Format(format!("{name} must hold one value"))),
        }
    };
    let stage = match one("meta.stage")? {
        1 => Stage::Stage1,
        2 => Stage::Stage2,
        s => return Err(Error::Format(format!("unknown stage {s}"))),
    };
    let rng = match ck.u64s("meta.rng")? {
        [seed, lo, hi] => RngState {
            seed: *seed,
            word_pos: u128::from(*lo) | (u128::from(*hi) << 64),
        },
        _ => return Err(Error::Format("meta.rng must hold three values".into())),
    };
    Ok(Meta {
        config_hash: one("meta.config_hash")?,
        stage,
        step: one("meta.step")?,
        rng,
    })
}

/// The hash a checkpoint of `stage` must carry to match `cfg`.
pub fn expected_hash(cfg: &RunConfig, stage: Stage) -> u64 {
    match stage {
        Stage::Stage1 => cfg.stage1_hash(),
        Stage::Stage2 => cfg.config_hash(),
    }
}

/// Overwrites every parameter of `store` from the checkpoint.
pub fn load_params(ck: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (shape, data) = ck.f64s(&name)?;
        let t = store.get_mut(id);
        if shape != t.shape() {
            return Err(Error::Format(format!("{name}: shape {shape:?} but model expects {:?}", t.shape())));
        }
        let trainable = t.requires_grad();
        *t = Tensor::new(shape, data.to_vec())?.with_requires_grad(trainable);
    }
    Ok(())
}

/// Rebuilds the model a checkpoint was saved from, after verifying it
/// belongs to `cfg`.
pub fn restore_model(ck: &Checkpoint, cfg: &RunConfig) -> Result<(MllmModel, Meta)> {
    let meta = read_meta(ck)?;
    let expected = expected_hash(cfg, meta.stage);
    if meta.config_hash != expected {
        return Err(Error::ConfigHash {
            expected,
            found: meta.config_hash,
        });
    }
    let rng = Rng::new(cfg.seed);
    let mut model = MllmModel::new(&cfg.model, &rng.child("init"))?;
    if meta.stage == Stage::Stage2 {
        if let Some(m) = cfg.moda {
            model.attach_moda(m, &rng.child("moda"))?;
        }
    }
    model.set_stage(meta.stage, cfg.train_adapter_in_stage2);
    load_params(ck, &mut model.store)?;
    Ok((model, meta))
}

/// Optimizer state saved alongside a checkpoint, for resuming.
pub fn restore_optimizer(ck: &Checkpoint, model: &MllmModel, stage: &StageConfig) -> Result<OptimizerState> {
    let meta = read_meta(ck)?;
    let mut opt = OptimizerState::new(&model.store, stage.adamw(), stage.schedule()?);
    opt.step = meta.step;
    let mut moments = BTreeMap::new();
    for (id, _) in opt.moments.iter() {
        let name = model.store.name(*id);
        let (_, m) = ck.f64s(&format!("opt.m/{name}"))?;
        let (_, v) = ck.f64s(&format!("opt.v/{name}"))?;
        moments.insert(
            *id,
            Moments {
                first: m.to_vec(),
                second: v.to_vec(),
            },
        );
    }
    opt.moments = moments;
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push_u64("meta.step", vec![7]);
        ck.push_f64("w", &[2, 3], vec![0.1, -2.5, 3.0, f64::MIN_POSITIVE, 1e300, -0.0]);
        ck.push_f64("s", &[], vec![4.0]);
        ck
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample().to_bytes();
        for i in [0usize, 9, 20, bytes.len() - 9, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))), "byte {i}");
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn layout_header() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"MODA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // first entry: name length, name, dtype u64, rank 1, dim 1, payload 7
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 9);
        assert_eq!(&bytes[14..23], b"meta.step");
        assert_eq!(bytes[23..25], [1, 1]);
    }

    #[test]
    fn typed_access() {
        let ck = sample();
        assert_eq!(ck.u64s("meta.step").unwrap(), &[7]);
        assert!(ck.u64s("w").is_err());
        assert_eq!(ck.f64s("w").unwrap().0, &[2, 3]);
        assert!(ck.f64s("missing").is_err());
    }
}
