//! Finite-difference gradient checks for ops, blocks and a full micro model.
//!
//! Relative error is `|analytic − numeric| / max(1, |numeric|)` with central
//! differences at `h = 1e-6`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::moda::{compute_mask, l1_mask_penalty, moda_forward, AuxLoss, ModaConfig, ModaParams, ModaVariant, ModulationMask, Placement, PenaltyTarget};
use crate::nn::{cross_attn_layer_forward, decoder_block_forward, mha_forward, self_attn_layer_forward, LayerConfig, Linear, TransformerLayerParams};
use crate::pipeline::{Batch, ForwardOptions, MllmModel, ModelConfig, Stage};
use crate::tensor::{Graph, ParamStore, Rng, Tape, Tensor, Var, DIFFERENTIABLE_OPS};

pub const STEP: f64 = 1e-6;
pub const OPS_TOLERANCE: f64 = 1e-6;
pub const BLOCKS_TOLERANCE: f64 = 1e-6;
pub const END2END_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    End2End,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "end2end" => Ok(Scope::End2End),
            other => Err(Error::Config(format!("unknown grad-check scope {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub scope: Scope,
    pub entries: Vec<CheckEntry>,
    /// Ops that appeared on any checked tape.
    pub ops_seen: BTreeSet<&'static str>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckEntry::passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    /// Differentiable ops never exercised by this run.
    pub fn missing_ops(&self) -> Vec<&'static str> {
        DIFFERENTIABLE_OPS.iter().copied().filter(|op| !self.ops_seen.contains(op)).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<28} max_rel_err {:.3e}  tol {:.0e}  {}",
                e.name,
                e.max_rel_err,
                e.tolerance,
                if e.passed() { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(out, "ops covered: {}", self.ops_seen.iter().copied().collect::<Vec<_>>().join(", "));
        out
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("finite")
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

type TapeFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks gradients of a scalar function of plain tensors.
pub fn check_inputs(inputs: &[Tensor], f: TapeFn) -> Result<(f64, usize, BTreeSet<&'static str>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(&x.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let ops = tape.op_names();
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let l = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(l))
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for k in 0..inputs.len() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok((worst, checked, ops))
}

type GraphFn<'a> = &'a dyn Fn(&mut Graph) -> Result<Var>;

/// Checks gradients w.r.t. every trainable entry of `store`.
pub fn check_params(store: &ParamStore, f: GraphFn) -> Result<(f64, usize, BTreeSet<&'static str>)> {
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let ops = g.tape.op_names();
    let grads = g.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    grads.accumulate_into_store(&mut analytic)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = f(&mut g)?;
        Ok(g.tape.scalar_value(l))
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).requires_grad() {
            continue;
        }
        let zeros = vec![0.0; store.get(id).numel()];
        let a = analytic.get(id).grad().unwrap_or(&zeros).to_vec();
        for i in 0..a.len() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(a[i], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok((worst, checked, ops))
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so no gradient is uniform.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let n: usize = tape.shape(y).iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.618).sin()).collect();
    let wv = tape.constant(Tensor::new(tape.shape(y), w)?);
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

struct Suite {
    entries: Vec<CheckEntry>,
    ops: BTreeSet<&'static str>,
}

impl Suite {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            ops: BTreeSet::new(),
        }
    }

    fn record(&mut self, name: &str, tol: f64, res: (f64, usize, BTreeSet<&'static str>)) {
        self.ops.extend(res.2);
        self.entries.push(CheckEntry {
            name: name.to_string(),
            max_rel_err: res.0,
            tolerance: tol,
            checked: res.1,
        });
    }

    fn op(&mut self, name: &str, inputs: Vec<Tensor>, f: TapeFn) -> Result<()> {
        let res = check_inputs(&inputs, f)?;
        self.record(name, OPS_TOLERANCE, res);
        Ok(())
    }
}

fn ops_suite() -> Result<Suite> {
    let mut s = Suite::new();
    let mut rng = Rng::new(0x6772_6164);
    let r = &mut rng;
    s.op("matmul", vec![random(&[3, 4], r), random(&[4, 5], r)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    })?;
    s.op("matmul (batched)", vec![random(&[2, 3, 4], r), random(&[2, 4, 5], r)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    })?;
    s.op("add (broadcast)", vec![random(&[2, 3, 5], r), random(&[5], r)], &|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y)
    })?;
    s.op("sub (broadcast)", vec![random(&[2, 3, 5], r), random(&[3, 1], r)], &|t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y)
    })?;
    s.op("mul (broadcast)", vec![random(&[2, 1, 5], r), random(&[3, 5], r)], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y)
    })?;
    s.op("scale", vec![random(&[4, 3], r)], &|t, v| {
        let y = t.scale(v[0], -1.7)?;
        weighted_sum(t, y)
    })?;
    s.op("sigmoid", vec![random(&[4, 3], r)], &|t, v| {
        let y = t.sigmoid(v[0])?;
        weighted_sum(t, y)
    })?;
    s.op("gelu", vec![random(&[4, 3], r)], &|t, v| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y)
    })?;
    s.op("softmax (last axis)", vec![random(&[2, 3, 5], r)], &|t, v| {
        let y = t.softmax(v[0], 2)?;
        weighted_sum(t, y)
    })?;
    s.op("softmax (inner axis)", vec![random(&[2, 3, 5], r)], &|t, v| {
        let y = t.softmax(v[0], 1)?;
        weighted_sum(t, y)
    })?;
    s.op("layernorm", vec![random(&[2, 3, 5], r), random(&[5], r), random(&[5], r)], &|t, v| {
        let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y)
    })?;
    s.op("cross_entropy", vec![random(&[4, 6], r)], &|t, v| t.cross_entropy(v[0], &[1, 99, 5, 0], 99))?;
    s.op("concat", vec![random(&[2, 3], r), random(&[2, 2], r)], &|t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        weighted_sum(t, y)
    })?;
    s.op("slice", vec![random(&[2, 5, 3], r)], &|t, v| {
        let y = t.slice(v[0], 1, 1, 3)?;
        weighted_sum(t, y)
    })?;
    s.op("permute", vec![random(&[2, 3, 4], r)], &|t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        weighted_sum(t, y)
    })?;
    s.op("reshape", vec![random(&[2, 3, 4], r)], &|t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        let z = t.sigmoid(y)?;
        weighted_sum(t, z)
    })?;
    s.op("embedding", vec![random(&[5, 3], r)], &|t, v| {
        let y = t.embedding(v[0], &[4, 1, 4, 0], &[2, 2])?;
        weighted_sum(t, y)
    })?;
    s.op("mean_abs", vec![random(&[3, 4], r)], &|t, v| t.mean_abs(v[0]))?;
    s.op("sum", vec![random(&[3, 4], r)], &|t, v| {
        let y = t.gelu(v[0])?;
        t.sum(y)
    })?;
    s.op("mean", vec![random(&[3, 4], r)], &|t, v| {
        let y = t.sigmoid(v[0])?;
        t.mean(y)
    })?;
    Ok(s)
}

const E: usize = 8;

fn trainable(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, true);
    }
}

fn blocks_suite() -> Result<Suite> {
    let mut s = Suite::new();
    let rng = Rng::new(0x626c_6b73);
    let mut data = rng.child("inputs");
    let layer = LayerConfig::new(E, 2, 2);

    let mut store = ParamStore::new();
    let x = store.register("x", random(&[2, 3, E], &mut data))?;
    let mem = store.register("mem", random(&[2, 4, E], &mut data))?;
    let lin = Linear::init(&mut store, &rng, "lin", E, 5, true)?;
    let tl = TransformerLayerParams::init(&mut store, &rng, "layer", &layer)?;
    trainable(&mut store);

    let res = check_params(&store, &|g| {
        let xv = g.p(x);
        let y = lin.forward(g, xv)?;
        weighted_sum(&mut g.tape, y)
    })?;
    s.record("linear", BLOCKS_TOLERANCE, res);
    let res = check_params(&store, &|g| {
        let xv = g.p(x);
        let y = tl.ln_attn.forward(g, xv)?;
        weighted_sum(&mut g.tape, y)
    })?;
    s.record("layernorm (params)", BLOCKS_TOLERANCE, res);
    let res = check_params(&store, &|g| {
        let xv = g.p(x);
        let y = mha_forward(g, xv, xv, &tl.attn, true)?;
        weighted_sum(&mut g.tape, y)
    })?;
    s.record("mha (causal self)", BLOCKS_TOLERANCE, res);
    let res = check_params(&store, &|g| {
        let (xv, mv) = (g.p(x), g.p(mem));
        let y = mha_forward(g, xv, mv, &tl.attn, false)?;
        weighted_sum(&mut g.tape, y)
    })?;
    s.record("mha (cross)", BLOCKS_TOLERANCE, res);
    let res = check_params(&store, &|g| {
        let (xv, mv) = (g.p(x), g.p(mem));
        let y = cross_attn_layer_forward(g, xv, mv, &tl)?;
        weighted_sum(&mut g.tape, y)
    })?;
    s.record("cross-attention layer", BLOCKS_TOLERANCE, res);
    let res = check_params(&store, &|g| {
        let xv = g.p(x);
        let y = self_attn_layer_forward(g, xv, &tl, false)?;
        weighted_sum(&mut g.tape, y)
    })?;
    s.record("self-attention layer", BLOCKS_TOLERANCE, res);
    let res = check_params(&store, &|g| {
        let xv = g.p(x);
        let y = decoder_block_forward(g, xv, &tl)?;
        weighted_sum(&mut g.tape, y)
    })?;
    s.record("decoder block", BLOCKS_TOLERANCE, res);

    for variant in [ModaVariant::CrossAttention, ModaVariant::MlpVisualOnly, ModaVariant::SelfAttnConcat] {
        let cfg = ModaConfig {
            variant,
            n_heads: 2,
            ffn_mult: 2,
            ..ModaConfig::reference()
        };
        let mut store = ParamStore::new();
        let v = store.register("v", random(&[2, 3, E], &mut data))?;
        let t = store.register("t", random(&[2, 2, E], &mut data))?;
        let params = ModaParams::init(&mut store, &rng, "moda", &cfg, &cfg.layer_config(E, true, 1e-5))?;
        trainable(&mut store);
        let res = check_params(&store, &|g| {
            let (vv, tv) = (g.p(v), g.p(t));
            let (y, _) = moda_forward(g, vv, Some(tv), &params, &cfg)?;
            weighted_sum(&mut g.tape, y)
        })?;
        s.record(&format!("moda ({variant:?})"), BLOCKS_TOLERANCE, res);
        if variant == ModaVariant::CrossAttention {
            for target in [PenaltyTarget::Mask, PenaltyTarget::Logits] {
                let res = check_params(&store, &|g| {
                    let (vv, tv) = (g.p(v), g.p(t));
                    let mask: ModulationMask = compute_mask(g, vv, Some(tv), &params, &cfg)?;
                    l1_mask_penalty(g, &mask, 0.5, target)
                })?;
                s.record(&format!("l1 penalty ({target:?})"), BLOCKS_TOLERANCE, res);
            }
        }
    }
    Ok(s)
}

/// The micro configuration used by the end-to-end check.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        width: E,
        vision_width: 6,
        n_visual: 2,
        vocab_size: 10,
        n_blocks: 1,
        n_heads: 2,
        ffn_mult: 2,
        max_seq: 8,
        ln_eps: 1e-5,
        dropout: 0.0,
    }
}

fn end2end_suite() -> Result<Suite> {
    let mut s = Suite::new();
    let cfg = micro_model_config();
    let rng = Rng::new(0x6532_6532);
    let mut data = rng.child("batch");
    let (b, m, l) = (2, 2, 2);
    let image = random(&[b, cfg.n_visual, cfg.vision_width], &mut data);
    let instr: Vec<usize> = (0..b * m).map(|_| 2 + data.below(cfg.vocab_size - 2)).collect();
    let target: Vec<usize> = (0..b * l).map(|_| 2 + data.below(cfg.vocab_size - 2)).collect();
    let batch = Batch::new(image, instr, m, target, l)?;

    let mut base = MllmModel::new(&cfg, &rng.child("model"))?;
    base.set_stage(Stage::Stage1, true);
    let res = check_params(&base.store, &|g| Ok(base.forward_train(g, &batch, ForwardOptions::default())?.loss))?;
    s.record("micro model (stage 1)", END2END_TOLERANCE, res);

    for placement in [Placement::Beginning, Placement::AllLayers] {
        let mut model = base.clone();
        let mc = ModaConfig {
            n_heads: 2,
            ffn_mult: 2,
            placement,
            aux_loss: AuxLoss::L1 { weight: 0.01 },
            ..ModaConfig::reference()
        };
        model.attach_moda(mc, &rng.child("moda"))?;
        model.set_stage(Stage::Stage2, true);
        let res = check_params(&model.store, &|g| Ok(model.forward_train(g, &batch, ForwardOptions::default())?.loss))?;
        s.record(&format!("micro model + moda ({placement:?})"), END2END_TOLERANCE, res);
    }
    Ok(s)
}

/// Runs one scope of the finite-difference suite at fixed seeds.
pub fn grad_check(scope: Scope) -> Result<GradCheckReport> {
    let suite = match scope {
        Scope::Ops => ops_suite()?,
        Scope::Blocks => blocks_suite()?,
        Scope::End2End => end2end_suite()?,
    };
    Ok(GradCheckReport {
        scope,
        entries: suite.entries,
        ops_seen: suite.ops,
    })
}
