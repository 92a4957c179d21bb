//! Synthetic instruction-conditioned channel-selection task.
//!
//! Every image has `N` visual tokens. Each token carries `K` attributes, one
//! per group of `C` channels, and each attribute takes one of `A` values
//! written as a fixed orthonormal code vector plus Gaussian noise. The
//! instruction `[QUERY, group g, index n]` asks for the value of attribute
//! `g` of token `n`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const EOS: usize = 0;
pub const PAD: usize = 1;
pub const QUERY: usize = 2;
pub const DESCRIBE: usize = 3;

const MAGIC: &[u8; 4] = b"MODS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub n_tokens: usize,
    pub n_groups: usize,
    pub channels_per_group: usize,
    pub n_values: usize,
    pub noise_std: f64,
    /// Seed for the attribute code vectors; part of the task, not the split.
    pub code_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_tokens: 16,
            n_groups: 4,
            channels_per_group: 12,
            n_values: 4,
            noise_std: 0.1,
            code_seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.n_groups == 0 || self.n_values < 2 {
            return Err(Error::Config(format!("degenerate task spec {self:?}")));
        }
        if self.n_values > self.channels_per_group {
            return Err(Error::Config(format!(
                "{} orthonormal codes do not fit in {} channels",
                self.n_values, self.channels_per_group
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("bad noise std {}", self.noise_std)));
        }
        Ok(())
    }

    /// `E_v = K·C`.
    pub fn feature_width(&self) -> usize {
        self.n_groups * self.channels_per_group
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_groups: self.n_groups,
            n_tokens: self.n_tokens,
            n_values: self.n_values,
        }
    }

    pub fn hash(&self) -> u64 {
        crate::tensor::fnv1a64(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }

    /// `codes[g][a]` is the unit code of value `a` in group `g`.
    pub fn codes(&self) -> Vec<Vec<Vec<f64>>> {
        let rng = Rng::new(self.code_seed);
        (0..self.n_groups)
            .map(|g| orthonormal_set(&mut rng.child(&format!("codes/{g}")), self.n_values, self.channels_per_group))
            .collect()
    }

    /// log2 of the number of distinct noiseless samples.
    fn log2_unique(&self) -> f64 {
        (self.n_tokens * self.n_groups) as f64 * (self.n_values as f64).log2()
            + ((self.n_tokens * self.n_groups) as f64).log2()
    }
}

/// Gram-Schmidt over Gaussian draws.
fn orthonormal_set(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    out
}

/// Token id layout: `EOS, PAD, QUERY, DESCRIBE`, then one token per group,
/// one per visual-token index and one per attribute value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub n_groups: usize,
    pub n_tokens: usize,
    pub n_values: usize,
}

impl Vocab {
    pub fn group(&self, g: usize) -> usize {
        4 + g
    }

    pub fn index(&self, n: usize) -> usize {
        4 + self.n_groups + n
    }

    pub fn value(&self, a: usize) -> usize {
        4 + self.n_groups + self.n_tokens + a
    }

    pub fn len(&self) -> usize {
        4 + self.n_groups + self.n_tokens + self.n_values
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn decode_value(&self, id: usize) -> Option<usize> {
        id.checked_sub(self.value(0)).filter(|a| *a < self.n_values)
    }

    fn decode_group(&self, id: usize) -> Option<usize> {
        id.checked_sub(self.group(0)).filter(|g| *g < self.n_groups)
    }

    fn decode_index(&self, id: usize) -> Option<usize> {
        id.checked_sub(self.index(0)).filter(|n| *n < self.n_tokens)
    }

    pub fn instruction(&self, g: usize, n: usize) -> Vec<usize> {
        vec![QUERY, self.group(g), self.index(n)]
    }

    /// Parses `[QUERY, group, index]`.
    pub fn parse_instruction(&self, ids: &[usize]) -> Result<(usize, usize)> {
        match ids {
            [q, g, n] if *q == QUERY => match (self.decode_group(*g), self.decode_index(*n)) {
                (Some(g), Some(n)) => Ok((g, n)),
                _ => Err(Error::Input(format!("malformed instruction {ids:?}"))),
            },
            _ => Err(Error::Input(format!("malformed instruction {ids:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[N, E_v]`, row-major.
    pub image_feats: Vec<f64>,
    pub instr_ids: Vec<usize>,
    pub answer_id: usize,
    pub group: usize,
    pub token: usize,
    /// `[N, K]` attribute values of the whole image.
    pub attributes: Vec<u8>,
}

impl Sample {
    pub fn value(&self, spec: &TaskSpec) -> usize {
        self.attributes[self.token * spec.n_groups + self.group] as usize
    }

    /// Canonical description used by the alignment stage: the value tokens
    /// of every attribute of visual token 0, then EOS.
    pub fn caption(&self, spec: &TaskSpec) -> Vec<usize> {
        let vocab = spec.vocab();
        let mut out: Vec<usize> = self.attributes[..spec.n_groups]
            .iter()
            .map(|a| vocab.value(*a as usize))
            .collect();
        out.push(EOS);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 8000,
            val: 1000,
            test: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub spec: TaskSpec,
    pub seed: u64,
    pub spec_hash: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Generates one sample from its own stream, so any sample can be rebuilt
/// from `(spec, seed, id)` alone.
pub fn gen_sample(spec: &TaskSpec, codes: &[Vec<Vec<f64>>], seed: u64, id: u64) -> Sample {
    let mut rng = Rng::new(seed).child(&format!("sample/{id}"));
    let (n_tok, k, c) = (spec.n_tokens, spec.n_groups, spec.channels_per_group);
    let ev = spec.feature_width();
    let attributes: Vec<u8> = (0..n_tok * k).map(|_| rng.below(spec.n_values) as u8).collect();
    let mut image_feats = vec![0.0; n_tok * ev];
    for n in 0..n_tok {
        for g in 0..k {
            let code = &codes[g][attributes[n * k + g] as usize];
            image_feats[n * ev + g * c..n * ev + (g + 1) * c].copy_from_slice(code);
        }
    }
    if spec.noise_std > 0.0 {
        for x in &mut image_feats {
            *x += spec.noise_std * rng.normal();
        }
    }
    let group = rng.below(k);
    let token = rng.below(n_tok);
    let vocab = spec.vocab();
    Sample {
        id,
        image_feats,
        instr_ids: vocab.instruction(group, token),
        answer_id: vocab.value(attributes[token * k + group] as usize),
        group,
        token,
        attributes,
    }
}

pub fn gen_dataset(spec: &TaskSpec, seed: u64, sizes: SplitSizes) -> Result<DatasetSplit> {
    spec.validate()?;
    let total = sizes.train + sizes.val + sizes.test;
    if total > 0 && (total as f64).log2() > spec.log2_unique() {
        return Err(Error::Config(format!(
            "{total} samples requested but the task only has 2^{:.1} distinct ones",
            spec.log2_unique()
        )));
    }
    let codes = spec.codes();
    let range = |lo: usize, n: usize| -> Vec<Sample> {
        (lo..lo + n).map(|id| gen_sample(spec, &codes, seed, id as u64)).collect()
    };
    Ok(DatasetSplit {
        spec: spec.clone(),
        seed,
        spec_hash: spec.hash(),
        train: range(0, sizes.train),
        val: range(sizes.train, sizes.val),
        test: range(sizes.train + sizes.val, sizes.test),
    })
}

/// Brute-force answer: nearest code on the queried channel group of the
/// queried token.
pub fn oracle_answer(sample: &Sample, spec: &TaskSpec) -> Result<usize> {
    oracle_with_codes(sample, spec, &spec.codes())
}

pub fn oracle_with_codes(sample: &Sample, spec: &TaskSpec, codes: &[Vec<Vec<f64>>]) -> Result<usize> {
    let vocab = spec.vocab();
    let (g, n) = vocab.parse_instruction(&sample.instr_ids)?;
    let c = spec.channels_per_group;
    let ev = spec.feature_width();
    if sample.image_feats.len() != spec.n_tokens * ev {
        return Err(Error::Input(format!("image has {} values", sample.image_feats.len())));
    }
    let x = &sample.image_feats[n * ev + g * c..n * ev + (g + 1) * c];
    let dist = |code: &[f64]| -> f64 { x.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum() };
    let best = (0..spec.n_values)
        .min_by(|&a, &b| dist(&codes[g][a]).total_cmp(&dist(&codes[g][b])))
        .expect("n_values >= 2");
    Ok(vocab.value(best))
}

/// The sample itself and the same image queried about group `(g + 1) mod K`.
pub fn counterfactual_pair(sample: &Sample, spec: &TaskSpec) -> Result<(Sample, Sample)> {
    if spec.n_groups < 2 {
        return Err(Error::Config("counterfactual pairs need at least two groups".into()));
    }
    let vocab = spec.vocab();
    let g2 = (sample.group + 1) % spec.n_groups;
    let mut other = sample.clone();
    other.group = g2;
    other.instr_ids = vocab.instruction(g2, sample.token);
    other.answer_id = vocab.value(other.value(spec));
    Ok((sample.clone(), other))
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get<const B: usize>(r: &mut impl Read) -> Result<[u8; B]> {
    let mut buf = [0u8; B];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated dataset file: {e}")))?;
    Ok(buf)
}

/// One split: header (magic, version, spec JSON, seed, count), then
/// fixed-width little-endian records.
pub fn write_split(w: &mut impl Write, spec: &TaskSpec, seed: u64, samples: &[Sample]) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let json = serde_json::to_vec(spec)?;
    put_u32(w, json.len() as u32)?;
    w.write_all(&json)?;
    put_u64(w, seed)?;
    put_u64(w, samples.len() as u64)?;
    for s in samples {
        put_u64(w, s.id)?;
        put_u32(w, s.group as u32)?;
        put_u32(w, s.token as u32)?;
        put_u32(w, s.answer_id as u32)?;
        put_u32(w, s.instr_ids.len() as u32)?;
        for id in &s.instr_ids {
            put_u32(w, *id as u32)?;
        }
        w.write_all(&s.attributes)?;
        for x in &s.image_feats {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_split(r: &mut impl Read) -> Result<(TaskSpec, u64, Vec<Sample>)> {
    if &get::<4>(r)? != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = u32::from_le_bytes(get(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let len = u32::from_le_bytes(get(r)?) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|e| Error::Format(format!("truncated dataset header: {e}")))?;
    let spec: TaskSpec = serde_json::from_slice(&json)?;
    spec.validate()?;
    let seed = u64::from_le_bytes(get(r)?);
    let count = u64::from_le_bytes(get(r)?);
    let ev = spec.feature_width();
    let mut samples = Vec::new();
    for _ in 0..count {
        let id = u64::from_le_bytes(get(r)?);
        let group = u32::from_le_bytes(get(r)?) as usize;
        let token = u32::from_le_bytes(get(r)?) as usize;
        let answer_id = u32::from_le_bytes(get(r)?) as usize;
        let m = u32::from_le_bytes(get(r)?) as usize;
        if m > 64 {
            return Err(Error::Format(format!("instruction length {m}")));
        }
        let instr_ids = (0..m)
            .map(|_| get::<4>(r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut attributes = vec![0u8; spec.n_tokens * spec.n_groups];
        r.read_exact(&mut attributes)
            .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
        let image_feats = (0..spec.n_tokens * ev)
            .map(|_| get::<8>(r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id,
            image_feats,
            instr_ids,
            answer_id,
            group,
            token,
            attributes,
        });
    }
    Ok((spec, seed, samples))
}

/// Writes `train.mods`, `val.mods` and `test.mods` into `dir`.
pub fn save_dataset(data: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{}.mods", name.as_str())))?);
        write_split(&mut f, &data.spec, data.seed, data.split(name))?;
        f.flush()?;
    }
    Ok(())
}
