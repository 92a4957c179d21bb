//! The modulation adapter.
//!
//! A mask `M = σ(F·W + b)` of shape `[B, N, E]` is computed from the aligned
//! visual tokens (and, for the attention variants, the instruction
//! embeddings) and multiplied channel-wise into the visual tokens.
//! `F` is one of:
//!
//! * `CrossAttention`: a stack of pre-norm cross-attention layers with the
//!   visual tokens as queries and the instruction embeddings as keys/values;
//! * `MlpVisualOnly`: a per-token MLP over the visual tokens alone;
//! * `SelfAttnConcat`: self-attention over `[visual; instruction]`, truncated
//!   back to the visual positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cross_attn_layer_forward, self_attn_layer_forward, LayerConfig, Linear, TransformerLayerParams};
use crate::tensor::{Graph, ParamStore, Rng, Tensor, Var};

/// Projection bias used by the gate-open initialization; `σ(6) ≈ 0.9975`.
pub const GATE_OPEN_BIAS: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModaVariant {
    CrossAttention,
    MlpVisualOnly,
    SelfAttnConcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AuxLoss {
    None,
    L1 { weight: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Once, on the adapter output.
    Beginning,
    /// On the visual positions of every decoder block's input.
    AllLayers,
}

/// What the ℓ1 penalty is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyTarget {
    #[default]
    Mask,
    Logits,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModaConfig {
    pub variant: ModaVariant,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub aux_loss: AuxLoss,
    pub placement: Placement,
    #[serde(default)]
    pub penalty_target: PenaltyTarget,
    /// Start with the final bias at [`GATE_OPEN_BIAS`] so the mask is ≈ 1.
    #[serde(default)]
    pub gate_open_init: bool,
    /// With `AllLayers`, reuse one instance for every block.
    #[serde(default)]
    pub share_across_blocks: bool,
}

impl ModaConfig {
    /// Two cross-attention layers with 16 heads, no auxiliary loss, applied
    /// once at the beginning of the LM.
    pub fn reference() -> Self {
        Self {
            variant: ModaVariant::CrossAttention,
            n_layers: 2,
            n_heads: 16,
            ffn_mult: 4,
            aux_loss: AuxLoss::None,
            placement: Placement::Beginning,
            penalty_target: PenaltyTarget::Mask,
            gate_open_init: false,
            share_across_blocks: false,
        }
    }

    pub fn mlp(n_layers: usize) -> Self {
        Self {
            variant: ModaVariant::MlpVisualOnly,
            n_layers,
            ..Self::reference()
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("MoDA needs at least one layer".into()));
        }
        if self.variant != ModaVariant::MlpVisualOnly {
            LayerConfig::new(width, self.n_heads, self.ffn_mult).validate()?;
        }
        if let AuxLoss::L1 { weight } = self.aux_loss {
            // zero is accepted so the degenerate weight can be compared with `None`
            if !(weight >= 0.0) || !weight.is_finite() {
                return Err(Error::Config(format!("l1 weight must be non-negative, got {weight}")));
            }
        }
        Ok(())
    }

    pub fn layer_config(&self, width: usize, attn_bias: bool, ln_eps: f64) -> LayerConfig {
        LayerConfig {
            width,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            attn_bias,
            ln_eps,
        }
    }
}

/// Channel-wise gate, every entry in (0, 1). Lives on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ModulationMask {
    pub values: Var,
    /// Pre-sigmoid activations.
    pub logits: Var,
}

impl ModulationMask {
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        g.tape.tensor(self.values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModaStack {
    CrossAttention(Vec<TransformerLayerParams>),
    MlpVisualOnly(Vec<Linear>),
    SelfAttnConcat(Vec<TransformerLayerParams>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModaParams {
    pub stack: ModaStack,
    /// Final `E × E` projection before the sigmoid.
    pub proj: Linear,
}

impl ModaParams {
    /// Registers a fresh, Xavier-initialized parameter set under `name`.
    pub fn init(
        store: &mut ParamStore,
        rng: &Rng,
        name: &str,
        cfg: &ModaConfig,
        layer: &LayerConfig,
    ) -> Result<Self> {
        cfg.validate(layer.width)?;
        let e = layer.width;
        let stack = match cfg.variant {
            ModaVariant::CrossAttention | ModaVariant::SelfAttnConcat => {
                let layers = (0..cfg.n_layers)
                    .map(|i| TransformerLayerParams::init(store, rng, &format!("{name}.layer{i}"), layer))
                    .collect::<Result<Vec<_>>>()?;
                if cfg.variant == ModaVariant::CrossAttention {
                    ModaStack::CrossAttention(layers)
                } else {
                    ModaStack::SelfAttnConcat(layers)
                }
            }
            ModaVariant::MlpVisualOnly => ModaStack::MlpVisualOnly(
                (0..cfg.n_layers)
                    .map(|i| Linear::init(store, rng, &format!("{name}.mlp{i}"), e, e, true))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let proj = Linear::init(store, rng, &format!("{name}.proj"), e, e, true)?;
        if cfg.gate_open_init {
            if let Some(b) = proj.bias {
                store.get_mut(b).data_mut().fill(GATE_OPEN_BIAS);
            }
        }
        Ok(Self { stack, proj })
    }

    pub fn variant(&self) -> ModaVariant {
        match self.stack {
            ModaStack::CrossAttention(_) => ModaVariant::CrossAttention,
            ModaStack::MlpVisualOnly(_) => ModaVariant::MlpVisualOnly,
            ModaStack::SelfAttnConcat(_) => ModaVariant::SelfAttnConcat,
        }
    }

    pub fn width(&self) -> usize {
        self.proj.d_in
    }

    /// Trainable parameter count of this instance, from the registered shapes.
    pub fn param_count(&self) -> usize {
        let stack: usize = match &self.stack {
            ModaStack::CrossAttention(ls) | ModaStack::SelfAttnConcat(ls) => {
                ls.iter().map(TransformerLayerParams::param_count).sum()
            }
            ModaStack::MlpVisualOnly(ls) => ls.iter().map(Linear::param_count).sum(),
        };
        stack + self.proj.param_count()
    }
}

fn dims3(g: &Graph, x: Var) -> Result<[usize; 3]> {
    match *g.tape.shape(x) {
        [b, n, e] => Ok([b, n, e]),
        ref s => Err(Error::Contract(format!("expected a [B, N, E] tensor, got {s:?}"))),
    }
}

/// Builds the modulation mask for `v_aligned: [B, N, E]` given instruction
/// embeddings `t_embed: [B, M, E]` (ignored by `MlpVisualOnly`).
pub fn compute_mask(
    g: &mut Graph,
    v_aligned: Var,
    t_embed: Option<Var>,
    params: &ModaParams,
    cfg: &ModaConfig,
) -> Result<ModulationMask> {
    if params.variant() != cfg.variant {
        return Err(Error::Config(format!(
            "config asks for {:?} but parameters are {:?}",
            cfg.variant,
            params.variant()
        )));
    }
    let [b, n, e] = dims3(g, v_aligned)?;
    if e != params.width() {
        return Err(Error::shape("compute_mask", g.tape.shape(v_aligned), &[params.width()]));
    }
    let memory = |g: &Graph| -> Result<Var> {
        let t = t_embed.ok_or_else(|| Error::Contract(format!("{:?} needs instruction embeddings", cfg.variant)))?;
        let [bt, _, et] = dims3(g, t)?;
        if bt != b || et != e {
            return Err(Error::shape("compute_mask", g.tape.shape(v_aligned), g.tape.shape(t)));
        }
        Ok(t)
    };
    let features = match &params.stack {
        ModaStack::CrossAttention(layers) => {
            let t = memory(g)?;
            let mut x = v_aligned;
            for layer in layers {
                x = cross_attn_layer_forward(g, x, t, layer)?;
            }
            x
        }
        ModaStack::MlpVisualOnly(layers) => {
            let mut x = v_aligned;
            for (i, layer) in layers.iter().enumerate() {
                if i > 0 {
                    x = g.tape.gelu(x)?;
                }
                x = layer.forward(g, x)?;
            }
            x
        }
        ModaStack::SelfAttnConcat(layers) => {
            let t = memory(g)?;
            let mut x = g.tape.concat(&[v_aligned, t], 1)?;
            for layer in layers {
                x = self_attn_layer_forward(g, x, layer, false)?;
            }
            g.tape.slice(x, 1, 0, n)?
        }
    };
    let logits = params.proj.forward(g, features)?;
    let values = g.tape.sigmoid(logits)?;
    Ok(ModulationMask { values, logits })
}

/// Channel-wise (Hadamard) product of the visual tokens with the mask.
pub fn modulate(g: &mut Graph, v_aligned: Var, mask: &ModulationMask) -> Result<Var> {
    let sv = g.tape.shape(v_aligned);
    let sm = g.tape.shape(mask.values);
    if sv != sm {
        return Err(Error::shape("modulate", sv, sm));
    }
    g.tape.mul(v_aligned, mask.values)
}

/// Mask computation followed by modulation; the mask is returned for
/// inspection and auxiliary losses.
pub fn moda_forward(
    g: &mut Graph,
    v_aligned: Var,
    t_embed: Option<Var>,
    params: &ModaParams,
    cfg: &ModaConfig,
) -> Result<(Var, ModulationMask)> {
    let mask = compute_mask(g, v_aligned, t_embed, params, cfg)?;
    let out = modulate(g, v_aligned, &mask)?;
    Ok((out, mask))
}

/// `λ · mean |·|` over all `B·N·E` entries of the mask (or its logits).
pub fn l1_mask_penalty(g: &mut Graph, mask: &ModulationMask, weight: f64, target: PenaltyTarget) -> Result<Var> {
    if !(weight >= 0.0) {
        return Err(Error::Contract(format!("l1 weight must be non-negative, got {weight}")));
    }
    let src = match target {
        PenaltyTarget::Mask => mask.values,
        PenaltyTarget::Logits => mask.logits,
    };
    let m = g.tape.mean_abs(src)?;
    g.tape.scale(m, weight)
}

/// Closed-form trainable parameter count of one MoDA instance at width `e`
/// (attention projections carry biases).
pub fn param_count(cfg: &ModaConfig, e: usize) -> usize {
    let linear = e * e + e;
    let stack = match cfg.variant {
        ModaVariant::MlpVisualOnly => cfg.n_layers * linear,
        ModaVariant::CrossAttention | ModaVariant::SelfAttnConcat => {
            let h = cfg.ffn_mult * e;
            let attn = 4 * linear;
            let ffn = (e * h + h) + (h * e + e);
            let norms = 4 * e;
            cfg.n_layers * (attn + ffn + norms)
        }
    };
    stack + linear
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn build(variant: ModaVariant, e: usize, heads: usize) -> (ParamStore, ModaParams, ModaConfig) {
        let cfg = ModaConfig {
            variant,
            n_layers: 2,
            n_heads: heads,
            ..ModaConfig::reference()
        };
        let mut store = ParamStore::new();
        let layer = cfg.layer_config(e, true, 1e-5);
        let p = ModaParams::init(&mut store, &Rng::new(3), "moda", &cfg, &layer).unwrap();
        (store, p, cfg)
    }

    fn mask_of(store: &ParamStore, p: &ModaParams, cfg: &ModaConfig, v: &Tensor, t: &Tensor) -> Vec<f64> {
        let mut g = Graph::new(store);
        let (vv, tv) = (g.tape.leaf(v), g.tape.leaf(t));
        let m = compute_mask(&mut g, vv, Some(tv), p, cfg).unwrap();
        g.tape.value(m.values).to_vec()
    }

    const VARIANTS: [ModaVariant; 3] = [
        ModaVariant::CrossAttention,
        ModaVariant::MlpVisualOnly,
        ModaVariant::SelfAttnConcat,
    ];

    #[test]
    fn zero_projection_gives_half_mask() {
        for variant in VARIANTS {
            let (mut store, p, cfg) = build(variant, 8, 2);
            store.get_mut(p.proj.weight).data_mut().fill(0.0);
            store.get_mut(p.proj.bias.unwrap()).data_mut().fill(0.0);
            let mut rng = Rng::new(1);
            let m = mask_of(&store, &p, &cfg, &random(&[2, 3, 8], &mut rng), &random(&[2, 4, 8], &mut rng));
            assert!(m.iter().all(|v| *v == 0.5), "{variant:?}");
        }
    }

    #[test]
    fn mlp_ignores_instruction() {
        let (store, p, cfg) = build(ModaVariant::MlpVisualOnly, 8, 2);
        let mut rng = Rng::new(2);
        let v = random(&[2, 3, 8], &mut rng);
        let a = mask_of(&store, &p, &cfg, &v, &random(&[2, 4, 8], &mut rng));
        let b = mask_of(&store, &p, &cfg, &v, &random(&[2, 4, 8], &mut rng));
        assert_eq!(a, b);
        let mut g = Graph::new(&store);
        let vv = g.tape.leaf(&v);
        let m = compute_mask(&mut g, vv, None, &p, &cfg).unwrap();
        assert_eq!(g.tape.value(m.values), &a[..]);
    }

    #[test]
    fn cross_attention_invariant_to_instruction_order() {
        let (store, p, cfg) = build(ModaVariant::CrossAttention, 16, 4);
        let mut rng = Rng::new(4);
        let v = random(&[1, 5, 16], &mut rng);
        let t = random(&[1, 4, 16], &mut rng);
        let mut tp = t.clone();
        for (dst, src) in [2usize, 0, 3, 1].into_iter().enumerate() {
            for j in 0..16 {
                tp.data_mut()[dst * 16 + j] = t.data()[src * 16 + j];
            }
        }
        let a = mask_of(&store, &p, &cfg, &v, &t);
        let b = mask_of(&store, &p, &cfg, &v, &tp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
        // but the content of the instruction matters
        let c = mask_of(&store, &p, &cfg, &v, &random(&[1, 4, 16], &mut rng));
        assert!(a.iter().zip(&c).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn modulate_identities() {
        let mut rng = Rng::new(5);
        let v = random(&[2, 3, 4], &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vv = g.tape.leaf(&v);
        let ones = g.tape.leaf(&Tensor::ones(&[2, 3, 4]));
        let half = g.tape.leaf(&Tensor::full(&[2, 3, 4], 0.5));
        let m1 = ModulationMask { values: ones, logits: ones };
        let mh = ModulationMask { values: half, logits: half };
        let y1 = modulate(&mut g, vv, &m1).unwrap();
        let yh = modulate(&mut g, vv, &mh).unwrap();
        assert_eq!(g.tape.value(y1), v.data());
        for (a, b) in g.tape.value(yh).iter().zip(v.data()) {
            assert_eq!(*a, b / 2.0);
        }
        let rm = random(&[2, 3, 4], &mut rng);
        let r = g.tape.leaf(&rm);
        let mr = ModulationMask { values: r, logits: r };
        let y = modulate(&mut g, vv, &mr).unwrap();
        for i in 0..24 {
            assert!((g.tape.value(y)[i] - v.data()[i] * rm.data()[i]).abs() <= 1e-15);
        }
        let bad = g.tape.leaf(&Tensor::ones(&[2, 3, 5]));
        let mb = ModulationMask { values: bad, logits: bad };
        assert!(modulate(&mut g, vv, &mb).is_err());
    }

    #[test]
    fn forward_contracts_and_annihilates_zero() {
        for variant in VARIANTS {
            let (store, p, cfg) = build(variant, 8, 2);
            let mut rng = Rng::new(6);
            let v = random(&[2, 3, 8], &mut rng);
            let t = random(&[2, 2, 8], &mut rng);
            let mut g = Graph::new(&store);
            let (vv, tv) = (g.tape.leaf(&v), g.tape.leaf(&t));
            let (out, _) = moda_forward(&mut g, vv, Some(tv), &p, &cfg).unwrap();
            for (o, i) in g.tape.value(out).iter().zip(v.data()) {
                assert!(o.abs() < i.abs() || (*i == 0.0 && *o == 0.0));
            }
            let z = g.tape.leaf(&Tensor::zeros(&[2, 3, 8]));
            let (out, _) = moda_forward(&mut g, z, Some(tv), &p, &cfg).unwrap();
            assert!(g.tape.value(out).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn variant_mismatch_is_config_error() {
        let (store, p, mut cfg) = build(ModaVariant::CrossAttention, 8, 2);
        cfg.variant = ModaVariant::MlpVisualOnly;
        let mut g = Graph::new(&store);
        let v = g.tape.leaf(&Tensor::ones(&[1, 2, 8]));
        assert!(matches!(compute_mask(&mut g, v, None, &p, &cfg), Err(Error::Config(_))));
        let w = g.tape.leaf(&Tensor::ones(&[1, 2, 6]));
        cfg.variant = ModaVariant::CrossAttention;
        assert!(matches!(compute_mask(&mut g, w, Some(v), &p, &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn l1_penalty_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let half = g.tape.leaf(&Tensor::full(&[2, 3, 4], 0.5));
        let m = ModulationMask { values: half, logits: half };
        let p = l1_mask_penalty(&mut g, &m, 1.0, PenaltyTarget::Mask).unwrap();
        assert_eq!(g.tape.scalar_value(p), 0.5);
        let p0 = l1_mask_penalty(&mut g, &m, 0.0, PenaltyTarget::Mask).unwrap();
        assert_eq!(g.tape.scalar_value(p0), 0.0);
    }

    #[test]
    fn l1_gradient_wrt_logits_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let z = random(&[2, 2, 3], &mut rng);
        let eval = |z: &Tensor| {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let zv = g.tape.leaf(z);
            let s = g.tape.sigmoid(zv).unwrap();
            let m = ModulationMask { values: s, logits: zv };
            let p = l1_mask_penalty(&mut g, &m, 0.7, PenaltyTarget::Mask).unwrap();
            g.tape.scalar_value(p)
        };
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let zv = g.tape.leaf(&z.clone().with_requires_grad(true));
        let s = g.tape.sigmoid(zv).unwrap();
        let m = ModulationMask { values: s, logits: zv };
        let p = l1_mask_penalty(&mut g, &m, 0.7, PenaltyTarget::Mask).unwrap();
        let grads = g.backward(p).unwrap();
        let analytic = grads.wrt(zv).unwrap();
        for i in 0..z.numel() {
            let mut up = z.clone();
            up.data_mut()[i] += 1e-6;
            let mut dn = z.clone();
            dn.data_mut()[i] -= 1e-6;
            let numeric = (eval(&up) - eval(&dn)) / 2e-6;
            assert!((analytic[i] - numeric).abs() / numeric.abs().max(1.0) <= 1e-6);
        }
    }

    #[test]
    fn param_count_closed_forms() {
        assert_eq!(param_count(&ModaConfig::mlp(2), 32), 2 * (32 * 32 + 32) + (32 * 32 + 32));
        let two = ModaConfig::reference();
        let four = ModaConfig { n_layers: 4, ..two };
        let proj = 64 * 64 + 64;
        assert_eq!(param_count(&four, 64) - proj, 2 * (param_count(&two, 64) - proj));
    }

    #[test]
    fn param_count_matches_registered_tensors() {
        for variant in VARIANTS {
            let (store, p, cfg) = build(variant, 16, 4);
            let enumerated: usize = store.iter().map(|(_, _, t)| t.numel()).sum();
            assert_eq!(param_count(&cfg, 16), enumerated, "{variant:?}");
            assert_eq!(p.param_count(), enumerated);
        }
    }

    #[test]
    fn gate_open_init_starts_near_one() {
        let cfg = ModaConfig {
            gate_open_init: true,
            n_heads: 2,
            ..ModaConfig::reference()
        };
        let mut store = ParamStore::new();
        let p = ModaParams::init(&mut store, &Rng::new(0), "m", &cfg, &cfg.layer_config(8, true, 1e-5)).unwrap();
        let mut rng = Rng::new(1);
        let m = mask_of(&store, &p, &cfg, &random(&[1, 2, 8], &mut rng), &random(&[1, 2, 8], &mut rng));
        assert!(m.iter().all(|v| *v > 0.9));
    }

    #[test]
    fn l1_weight_validation() {
        let mut cfg = ModaConfig::reference();
        cfg.aux_loss = AuxLoss::L1 { weight: -0.1 };
        assert!(cfg.validate(64).is_err());
        cfg.aux_loss = AuxLoss::L1 { weight: 0.0 };
        assert!(cfg.validate(64).is_ok());
        assert!(ModaConfig::reference().validate(40).is_err());
    }
}
