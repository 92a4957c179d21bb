//! Checkpoint-level commands: evaluation, generation, mask export and
//! the ablation matrix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moda::{AuxLoss, ModaConfig, ModaVariant, Placement};
use crate::pipeline::MllmModel;
use crate::synth::{DatasetSplit, Sample, SplitName, TaskSpec};
use crate::tensor::Tensor;

use super::checkpoint::{restore_model, Checkpoint};
use super::config::RunConfig;
use super::metrics::MetricsWriter;
use super::train::{dataset_for, evaluate_samples, train_stage1, train_stage2, EvalReport};

/// Loads a checkpoint written under `cfg`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<MllmModel> {
    let ck = Checkpoint::load(path)?;
    Ok(restore_model(&ck, cfg)?.0)
}

pub fn eval_checkpoint(cfg: &RunConfig, path: &Path, split: SplitName) -> Result<EvalReport> {
    let model = load_model(cfg, path)?;
    let data = dataset_for(cfg)?;
    evaluate_samples(&model, data.split(split), &cfg.task, cfg.eval.batch_size)
}

/// Picks samples by id from a split, in the order given.
pub fn select_samples(samples: &[Sample], ids: &[u64]) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| s.id == *id)
                .cloned()
                .ok_or_else(|| Error::Input(format!("no sample with id {id} in this split")))
        })
        .collect()
}

/// Instruction for `s`, or the `(group, index)` question in its place.
fn instruction_for(s: &Sample, spec: &TaskSpec, question: Option<(usize, usize)>) -> Result<Vec<usize>> {
    match question {
        None => Ok(s.instr_ids.clone()),
        Some((g, n)) => {
            if g >= spec.n_groups || n >= spec.n_tokens {
                return Err(Error::Input(format!("question ({g}, {n}) outside the task grid")));
            }
            Ok(spec.vocab().instruction(g, n))
        }
    }
}

fn image_of(s: &Sample, spec: &TaskSpec) -> Result<Tensor> {
    Tensor::new(&[1, spec.n_tokens, spec.feature_width()], s.image_feats.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub sample_id: u64,
    pub tokens: Vec<usize>,
    /// Answer value decoded from the first token, when it is a value token.
    pub value: Option<usize>,
}

/// Greedy decoding for each sample, optionally replacing its question.
pub fn generate_answers(
    model: &MllmModel,
    samples: &[Sample],
    spec: &TaskSpec,
    question: Option<(usize, usize)>,
    max_new_tokens: usize,
) -> Result<Vec<Generation>> {
    let vocab = spec.vocab();
    samples
        .iter()
        .map(|s| {
            let instr = instruction_for(s, spec, question)?;
            let tokens = model.generate(&image_of(s, spec)?, &instr, max_new_tokens)?.remove(0);
            let value = tokens.first().and_then(|&t| vocab.decode_value(t));
            Ok(Generation {
                sample_id: s.id,
                tokens,
                value,
            })
        })
        .collect()
}

/// One entry of an exported modulation mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub sample_id: u64,
    pub token_index: usize,
    pub channel_index: usize,
    pub mask_value: f64,
}

/// Mask entries of the first application site, sample by sample.
pub fn mask_rows(model: &MllmModel, samples: &[Sample], spec: &TaskSpec, question: Option<(usize, usize)>) -> Result<Vec<MaskRow>> {
    let mut rows = Vec::new();
    for s in samples {
        let instr = instruction_for(s, spec, question)?;
        let masks = model.masks(&image_of(s, spec)?, &instr)?;
        let m = &masks[0];
        let e = m.shape()[2];
        rows.extend(m.data().iter().enumerate().map(|(i, &v)| MaskRow {
            sample_id: s.id,
            token_index: i / e,
            channel_index: i % e,
            mask_value: v,
        }));
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask_csv(input: impl std::io::Read) -> Result<Vec<MaskRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Writes the mask CSV for `ids` from the test split; returns the row count.
pub fn inspect_mask(cfg: &RunConfig, ckpt: &Path, ids: &[u64], question: Option<(usize, usize)>, out: &Path) -> Result<usize> {
    let model = load_model(cfg, ckpt)?;
    let data = dataset_for(cfg)?;
    let samples = select_samples(data.split(SplitName::Test), ids)?;
    let rows = mask_rows(&model, &samples, &cfg.task, question)?;
    write_csv(&rows, fs::File::create(out)?)?;
    Ok(rows.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    /// `None` is the baseline without a modulation adapter.
    pub moda: Option<ModaConfig>,
}

impl AblationCell {
    pub fn new(name: &str, moda: Option<ModaConfig>) -> Self {
        Self { name: name.into(), moda }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationMatrix {
    /// Variant, auxiliary loss, depth and placement axes around the
    /// cross-attention default.
    pub fn standard(seeds: Vec<u64>) -> Self {
        let ca = ModaConfig::reference();
        let cells = vec![
            AblationCell::new("baseline", None),
            AblationCell::new("cross_attention", Some(ca)),
            AblationCell::new(
                "cross_attention_l1",
                Some(ModaConfig {
                    aux_loss: AuxLoss::L1 { weight: 0.01 },
                    ..ca
                }),
            ),
            AblationCell::new("mlp_depth2", Some(ModaConfig::mlp(2))),
            AblationCell::new("mlp_depth4", Some(ModaConfig::mlp(4))),
            AblationCell::new(
                "self_attn_concat",
                Some(ModaConfig {
                    variant: ModaVariant::SelfAttnConcat,
                    ..ca
                }),
            ),
            AblationCell::new(
                "cross_attention_all_layers",
                Some(ModaConfig {
                    placement: Placement::AllLayers,
                    ..ca
                }),
            ),
        ];
        Self { seeds, cells }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub report: std::result::Result<EvalReport, String>,
}

impl AblationRow {
    fn paired(&self) -> f64 {
        self.report.as_ref().map_or(f64::NEG_INFINITY, |r| r.paired_accuracy)
    }
}

/// Trains every cell at every seed on one dataset, sharing stage 1 per
/// seed, and evaluates on the test split. A failing cell is recorded and
/// the run moves on. Rows come back sorted by paired accuracy, best first.
pub fn run_ablation(base: &RunConfig, matrix: &AblationMatrix, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    if matrix.cells.is_empty() || matrix.seeds.is_empty() {
        return Err(Error::Config("ablation matrix needs at least one cell and one seed".into()));
    }
    let data = dataset_for(base)?;
    let mut rows = Vec::new();
    for &seed in &matrix.seeds {
        let cfg = RunConfig { seed, ..base.clone() };
        let stage1 = train_stage1(&cfg, &data, &mut MetricsWriter::discard()).map(|o| o.checkpoint);
        for cell in &matrix.cells {
            let report = match &stage1 {
                Ok(ck) => run_cell(&cfg, cell, &data, ck).map_err(|e| e.to_string()),
                Err(e) => Err(format!("stage 1: {e}")),
            };
            let row = AblationRow {
                cell: cell.name.clone(),
                seed,
                report,
            };
            progress(&row);
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| b.paired().total_cmp(&a.paired()));
    Ok(rows)
}

fn run_cell(cfg: &RunConfig, cell: &AblationCell, data: &DatasetSplit, stage1: &Checkpoint) -> Result<EvalReport> {
    let cfg = RunConfig {
        moda: cell.moda,
        ..cfg.clone()
    };
    let out = train_stage2(&cfg, data, stage1, &mut MetricsWriter::discard())?;
    evaluate_samples(&out.model, &data.test, &cfg.task, cfg.eval.batch_size)
}

/// Flat summary line for one cell × seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub cell: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub paired_accuracy: Option<f64>,
    pub mean_mask: Option<f64>,
    pub mask_sparsity: Option<f64>,
    pub error: Option<String>,
}

impl From<&AblationRow> for AblationSummary {
    fn from(r: &AblationRow) -> Self {
        let ok = r.report.as_ref().ok();
        Self {
            cell: r.cell.clone(),
            seed: r.seed,
            accuracy: ok.map(|e| e.accuracy),
            paired_accuracy: ok.map(|e| e.paired_accuracy),
            mean_mask: ok.and_then(|e| e.mean_mask),
            mask_sparsity: ok.and_then(|e| e.mask_sparsity),
            error: r.report.as_ref().err().cloned(),
        }
    }
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl std::io::Write) -> Result<()> {
    let summary: Vec<AblationSummary> = rows.iter().map(AblationSummary::from).collect();
    write_csv(&summary, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::StageConfig;
    use crate::pipeline::ModelConfig;
    use crate::synth::SplitSizes;

    pub(crate) fn tiny_config() -> RunConfig {
        let step = |lr| StageConfig {
            base_lr: lr,
            warmup_frac: 0.03,
            total_steps: 2,
            batch_size: 4,
            weight_decay: 0.0,
        };
        RunConfig {
            model: ModelConfig {
                width: 16,
                n_blocks: 1,
                n_heads: 2,
                ffn_mult: 1,
                vocab_size: 28,
                max_seq: 24,
                ..ModelConfig::default()
            },
            moda: Some(ModaConfig {
                n_layers: 1,
                n_heads: 2,
                ffn_mult: 1,
                ..ModaConfig::reference()
            }),
            data: SplitSizes { train: 16, val: 4, test: 4 },
            stage1: step(1e-3),
            stage2: step(1e-3),
            ..RunConfig::default()
        }
    }

    #[test]
    fn mask_csv_has_one_row_per_channel() {
        let cfg = tiny_config();
        let data = dataset_for(&cfg).unwrap();
        let s1 = train_stage1(&cfg, &data, &mut MetricsWriter::discard()).unwrap();
        let s2 = train_stage2(&cfg, &data, &s1.checkpoint, &mut MetricsWriter::discard()).unwrap();
        let rows = mask_rows(&s2.model, &data.test[..2], &cfg.task, None).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"sample_id,token_index,channel_index,mask_value\n"));
        let back = read_mask_csv(&buf[..]).unwrap();
        assert_eq!(back, rows);
        assert_eq!(rows.len(), 2 * 16 * cfg.model.width);
        assert!(rows.iter().all(|r| r.mask_value > 0.0 && r.mask_value < 1.0));
        assert_eq!(rows[0].sample_id, data.test[0].id);
    }

    #[test]
    fn baseline_has_no_masks() {
        let cfg = RunConfig { moda: None, ..tiny_config() };
        let data = dataset_for(&cfg).unwrap();
        let s1 = train_stage1(&cfg, &data, &mut MetricsWriter::discard()).unwrap();
        let s2 = train_stage2(&cfg, &data, &s1.checkpoint, &mut MetricsWriter::discard()).unwrap();
        let err = mask_rows(&s2.model, &data.test[..1], &cfg.task, None).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn single_cell_matches_direct_run() {
        let cfg = tiny_config();
        let matrix = AblationMatrix {
            seeds: vec![cfg.seed],
            cells: vec![AblationCell::new("ca", cfg.moda)],
        };
        let rows = run_ablation(&cfg, &matrix, |_| {}).unwrap();
        assert_eq!(rows.len(), 1);
        let data = dataset_for(&cfg).unwrap();
        let s1 = train_stage1(&cfg, &data, &mut MetricsWriter::discard()).unwrap();
        let s2 = train_stage2(&cfg, &data, &s1.checkpoint, &mut MetricsWriter::discard()).unwrap();
        let direct = evaluate_samples(&s2.model, &data.test, &cfg.task, cfg.eval.batch_size).unwrap();
        assert_eq!(rows[0].report.as_ref().unwrap(), &direct);
    }

    #[test]
    fn failing_cell_is_recorded() {
        let cfg = tiny_config();
        let bad = ModaConfig {
            n_heads: 3,
            ..cfg.moda.unwrap()
        };
        let matrix = AblationMatrix {
            seeds: vec![0, 1],
            cells: vec![AblationCell::new("ok", None), AblationCell::new("bad", Some(bad))],
        };
        let rows = run_ablation(&cfg, &matrix, |_| {}).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().filter(|r| r.report.is_err()).count(), 2);
        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
        assert!(rows[..2].iter().all(|r| r.report.is_ok()));
    }

    #[test]
    fn question_override_is_validated() {
        let cfg = tiny_config();
        let data = dataset_for(&cfg).unwrap();
        let model = MllmModel::new(&cfg.model, &crate::tensor::Rng::new(0)).unwrap();
        let out = generate_answers(&model, &data.test[..1], &cfg.task, Some((1, 2)), 3).unwrap();
        assert!(out[0].tokens.len() <= 3);
        assert!(generate_answers(&model, &data.test[..1], &cfg.task, Some((9, 0)), 3).is_err());
    }
}
