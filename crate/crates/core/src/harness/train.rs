//! Two-stage training and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::pipeline::{argmax, Batch, ForwardOptions, MllmModel, Stage};
use crate::synth::{counterfactual_pair, gen_dataset, DatasetSplit, Sample, TaskSpec, DESCRIBE, EOS};
use crate::tensor::{adamw_step, Graph, OptimizerState, Rng, Tensor};

use super::checkpoint::{restore_model, training_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::metrics::{MetricsRecord, MetricsWriter};

/// Mask entries below this count as switched off.
pub const SPARSE_THRESHOLD: f64 = 0.1;

fn stack_images(samples: &[&Sample], spec: &TaskSpec) -> Result<Tensor> {
    let per = spec.n_tokens * spec.feature_width();
    let mut data = Vec::with_capacity(samples.len() * per);
    for s in samples {
        data.extend_from_slice(&s.image_feats);
    }
    Tensor::new(&[samples.len(), spec.n_tokens, spec.feature_width()], data)
}

/// Alignment-stage batch: `[DESCRIBE]` → caption of visual token 0.
pub fn caption_batch(samples: &[&Sample], spec: &TaskSpec) -> Result<Batch> {
    let instr = vec![DESCRIBE; samples.len()];
    let target: Vec<usize> = samples.iter().flat_map(|s| s.caption(spec)).collect();
    Batch::new(stack_images(samples, spec)?, instr, 1, target, spec.n_groups + 1)
}

/// Instruction-tuning batch: `[QUERY, g, n]` → `[answer, EOS]`.
pub fn instruction_batch(samples: &[&Sample], spec: &TaskSpec) -> Result<Batch> {
    let m = samples.first().map_or(0, |s| s.instr_ids.len());
    if samples.iter().any(|s| s.instr_ids.len() != m) {
        return Err(Error::Input("instructions of different lengths in one batch".into()));
    }
    let instr: Vec<usize> = samples.iter().flat_map(|s| s.instr_ids.iter().copied()).collect();
    let target: Vec<usize> = samples.iter().flat_map(|s| [s.answer_id, EOS]).collect();
    Batch::new(stack_images(samples, spec)?, instr, m, target, 2)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub questions: usize,
    pub pairs: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub paired_accuracy: f64,
    pub mean_mask: Option<f64>,
    pub mask_sparsity: Option<f64>,
}

/// Single accuracy over every question and the fraction of pairs with
/// both members correct.
pub fn pair_scores(first: &[bool], second: &[bool]) -> (f64, f64) {
    let n = first.len().min(second.len());
    if n == 0 {
        return (0.0, 0.0);
    }
    let single = first[..n].iter().chain(&second[..n]).filter(|c| **c).count() as f64 / (2 * n) as f64;
    let paired = (0..n).filter(|&i| first[i] && second[i]).count() as f64 / n as f64;
    (single, paired)
}

struct MaskStats {
    sum: f64,
    sparse: usize,
    count: usize,
}

impl MaskStats {
    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    fn sparsity(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sparse as f64 / self.count as f64)
    }
}

/// Greedy first-token answers for every sample and its counterfactual
/// partner, plus teacher-forced loss and mask statistics.
pub fn evaluate_samples(model: &MllmModel, samples: &[Sample], spec: &TaskSpec, batch_size: usize) -> Result<EvalReport> {
    let pairs = samples
        .iter()
        .map(|s| counterfactual_pair(s, spec))
        .collect::<Result<Vec<_>>>()?;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    let mut loss_sum = 0.0;
    let mut stats = MaskStats { sum: 0.0, sparse: 0, count: 0 };
    let half = batch_size.div_ceil(2).max(1);
    for chunk in pairs.chunks(half) {
        let members: Vec<&Sample> = chunk.iter().map(|p| &p.0).chain(chunk.iter().map(|p| &p.1)).collect();
        let batch = instruction_batch(&members, spec)?;
        let mut g = Graph::new(&model.store);
        let out = model.forward_train(&mut g, &batch, ForwardOptions::default())?;
        loss_sum += g.tape.scalar_value(out.ce) * members.len() as f64;
        let shape = g.tape.shape(out.logits).to_vec();
        let (s, v) = (shape[1], shape[2]);
        let answer_pos = model.config.n_visual + batch.instr_len - 1;
        let logits = g.tape.value(out.logits);
        for (i, sample) in members.iter().enumerate() {
            let row = &logits[(i * s + answer_pos) * v..(i * s + answer_pos + 1) * v];
            let correct = argmax(row) == sample.answer_id;
            if i < chunk.len() {
                first.push(correct);
            } else {
                second.push(correct);
            }
        }
        for m in &out.masks {
            for &x in g.tape.value(m.values) {
                stats.sum += x;
                stats.sparse += usize::from(x < SPARSE_THRESHOLD);
                stats.count += 1;
            }
        }
    }
    let (accuracy, paired_accuracy) = pair_scores(&first, &second);
    Ok(EvalReport {
        questions: 2 * first.len(),
        pairs: first.len(),
        loss: loss_sum / (2 * first.len()).max(1) as f64,
        accuracy,
        paired_accuracy,
        mean_mask: stats.mean(),
        mask_sparsity: stats.sparsity(),
    })
}

/// Teacher-forced caption loss over `samples`.
pub fn caption_loss(model: &MllmModel, samples: &[Sample], spec: &TaskSpec, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = caption_batch(&refs, spec)?;
        let mut g = Graph::new(&model.store);
        let out = model.forward_train(&mut g, &batch, ForwardOptions::default())?;
        total += g.tape.scalar_value(out.ce) * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

pub struct StageOutcome {
    pub model: MllmModel,
    pub optimizer: OptimizerState,
    pub checkpoint: Checkpoint,
    pub records: Vec<MetricsRecord>,
}

fn val_subset<'a>(cfg: &RunConfig, data: &'a DatasetSplit) -> &'a [Sample] {
    let n = if cfg.eval.val_samples == 0 {
        data.val.len()
    } else {
        cfg.eval.val_samples.min(data.val.len())
    };
    &data.val[..n]
}

fn run_loop(
    cfg: &RunConfig,
    data: &DatasetSplit,
    mut model: MllmModel,
    stage: Stage,
    metrics: &mut MetricsWriter,
) -> Result<StageOutcome> {
    let (stage_cfg, stage_no, key) = match stage {
        Stage::Stage1 => (&cfg.stage1, 1u8, "stage1"),
        Stage::Stage2 => (&cfg.stage2, 2u8, "stage2"),
    };
    let spec = &cfg.task;
    let mut opt = OptimizerState::new(&model.store, stage_cfg.adamw(), stage_cfg.schedule()?);
    let mut sampler = Rng::new(cfg.seed).child(&format!("{key}.batches"));
    let dropout_rng = Rng::new(cfg.seed).child(&format!("{key}.dropout"));
    let start = Instant::now();
    let mut records = Vec::new();
    let val = val_subset(cfg, data);
    for step in 1..=stage_cfg.total_steps {
        let picks: Vec<&Sample> = (0..stage_cfg.batch_size)
            .map(|_| &data.train[sampler.below(data.train.len())])
            .collect();
        let batch = match stage {
            Stage::Stage1 => caption_batch(&picks, spec)?,
            Stage::Stage2 => instruction_batch(&picks, spec)?,
        };
        model.store.zero_grads();
        let (loss, grads) = {
            let mut g = Graph::new(&model.store);
            if cfg.model.dropout > 0.0 {
                g = g.with_dropout(cfg.model.dropout, dropout_rng.child(&step.to_string()));
            }
            let out = model.forward_train(&mut g, &batch, ForwardOptions::default())?;
            let loss = g.tape.scalar_value(out.loss);
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            (loss, g.backward(out.loss)?)
        };
        grads.accumulate_into_store(&mut model.store)?;
        let lr = adamw_step(&mut model.store, &mut opt)?;

        let mut rec = MetricsRecord::new(stage_no, step, loss, lr);
        let due = cfg.eval.every > 0 && (step % cfg.eval.every == 0 || step == stage_cfg.total_steps);
        if due && !val.is_empty() {
            match stage {
                Stage::Stage1 => rec.val_loss = Some(caption_loss(&model, val, spec, cfg.eval.batch_size)?),
                Stage::Stage2 => {
                    let r = evaluate_samples(&model, val, spec, cfg.eval.batch_size)?;
                    rec.val_loss = Some(r.loss);
                    rec.val_accuracy = Some(r.accuracy);
                    rec.paired_accuracy = Some(r.paired_accuracy);
                    rec.mean_mask = r.mean_mask;
                    rec.mask_sparsity = r.mask_sparsity;
                }
            }
        }
        if cfg.log_wall_time {
            rec.wall_time_s = Some(start.elapsed().as_secs_f64());
        }
        metrics.append(&rec)?;
        records.push(rec);
    }
    let hash = match stage {
        Stage::Stage1 => cfg.stage1_hash(),
        Stage::Stage2 => cfg.config_hash(),
    };
    let checkpoint = training_checkpoint(&model, &opt, &sampler, stage, hash);
    Ok(StageOutcome {
        model,
        optimizer: opt,
        checkpoint,
        records,
    })
}

/// Alignment stage: only the adapter learns, on the caption surrogate.
pub fn train_stage1(cfg: &RunConfig, data: &DatasetSplit, metrics: &mut MetricsWriter) -> Result<StageOutcome> {
    cfg.validate()?;
    let mut model = MllmModel::new(&cfg.model, &Rng::new(cfg.seed).child("init"))?;
    model.set_stage(Stage::Stage1, cfg.train_adapter_in_stage2);
    run_loop(cfg, data, model, Stage::Stage1, metrics)
}

/// Builds the instruction-tuning starting point: stage-1 weights plus a
/// freshly initialized modulation adapter (when configured).
pub fn stage2_model(cfg: &RunConfig, stage1: &Checkpoint) -> Result<MllmModel> {
    let (mut model, meta) = restore_model(stage1, &stage1_view(cfg))?;
    if meta.stage != Stage::Stage1 {
        return Err(Error::Config("instruction tuning must start from a stage-1 checkpoint".into()));
    }
    if let Some(m) = cfg.moda {
        model.attach_moda(m, &Rng::new(cfg.seed).child("moda"))?;
    }
    model.set_stage(Stage::Stage2, cfg.train_adapter_in_stage2);
    Ok(model)
}

/// `cfg` as the stage-1 loader sees it (stage-1 hash, no modulation adapter).
fn stage1_view(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        moda: None,
        ..cfg.clone()
    }
}

/// Instruction tuning from a stage-1 checkpoint with a fresh optimizer.
pub fn train_stage2(cfg: &RunConfig, data: &DatasetSplit, stage1: &Checkpoint, metrics: &mut MetricsWriter) -> Result<StageOutcome> {
    cfg.validate()?;
    let model = stage2_model(cfg, stage1)?;
    run_loop(cfg, data, model, Stage::Stage2, metrics)
}

pub fn dataset_for(cfg: &RunConfig) -> Result<DatasetSplit> {
    gen_dataset(&cfg.task, cfg.data_seed, cfg.data)
}

pub fn stage1_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("stage1.ckpt"), dir.join("metrics_stage1.jsonl"))
}

pub fn stage2_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("stage2.ckpt"), dir.join("metrics_stage2.jsonl"))
}

/// Runs stage 1 and writes its checkpoint and metrics under `cfg.out_dir`.
pub fn run_stage1(cfg: &RunConfig) -> Result<PathBuf> {
    let data = dataset_for(cfg)?;
    let (ckpt, metrics) = stage1_paths(&cfg.out_dir());
    let mut w = MetricsWriter::create(&metrics)?;
    let out = train_stage1(cfg, &data, &mut w)?;
    w.finish()?;
    out.checkpoint.save(&ckpt)?;
    Ok(ckpt)
}

/// Runs stage 2 from `stage1_ckpt` and writes its outputs under `cfg.out_dir`.
pub fn run_stage2(cfg: &RunConfig, stage1_ckpt: &Path) -> Result<PathBuf> {
    let data = dataset_for(cfg)?;
    let stage1 = Checkpoint::load(stage1_ckpt)?;
    let (ckpt, metrics) = stage2_paths(&cfg.out_dir());
    let mut w = MetricsWriter::create(&metrics)?;
    let out = train_stage2(cfg, &data, &stage1, &mut w)?;
    w.finish()?;
    out.checkpoint.save(&ckpt)?;
    Ok(ckpt)
}
