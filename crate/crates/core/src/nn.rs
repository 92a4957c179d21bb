//! Transformer building blocks: linear maps, layer norm, multi-head
//! attention (self or cross, optionally causal), GELU feed-forward, and
//! pre-norm residual layers.
//!
//! No positional information is injected anywhere in this module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Additive score for masked attention entries; `exp` of it underflows to 0.
const MASKED_SCORE: f64 = -1e9;

/// Shared hyper-parameters for one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub width: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub attn_bias: bool,
    pub ln_eps: f64,
}

impl LayerConfig {
    pub fn new(width: usize, n_heads: usize, ffn_mult: usize) -> Self {
        Self {
            width,
            n_heads,
            ffn_mult,
            attn_bias: true,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_heads == 0 || self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                self.n_heads, self.width
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Xavier-uniform weight (drawn from the `name`-keyed child stream),
    /// zero bias.
    pub fn init(
        store: &mut ParamStore,
        rng: &Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = xavier_uniform(&[d_in, d_out], &mut rng.child(&format!("{name}.weight")))?;
        let weight = store.register(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.p(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.p(b);
                g.tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::ones(&[width]))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[width]))?,
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.p(self.gain);
        let bias = g.p(self.bias);
        g.tape.layernorm(x, gain, bias, self.eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub width: usize,
}

impl MhaParams {
    pub fn init(store: &mut ParamStore, rng: &Rng, name: &str, cfg: &LayerConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.width;
        let b = cfg.attn_bias;
        Ok(Self {
            q: Linear::init(store, rng, &format!("{name}.q"), e, e, b)?,
            k: Linear::init(store, rng, &format!("{name}.k"), e, e, b)?,
            v: Linear::init(store, rng, &format!("{name}.v"), e, e, b)?,
            o: Linear::init(store, rng, &format!("{name}.o"), e, e, b)?,
            n_heads: cfg.n_heads,
            width: e,
        })
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.o].iter().map(|l| l.param_count()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub up: Linear,
    pub down: Linear,
}

impl FfnParams {
    pub fn init(store: &mut ParamStore, rng: &Rng, name: &str, cfg: &LayerConfig) -> Result<Self> {
        let hidden = cfg.ffn_mult * cfg.width;
        Ok(Self {
            up: Linear::init(store, rng, &format!("{name}.up"), cfg.width, hidden, true)?,
            down: Linear::init(store, rng, &format!("{name}.down"), hidden, cfg.width, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.down.forward(g, h)
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.down.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayerParams {
    pub attn: MhaParams,
    pub ffn: FfnParams,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

impl TransformerLayerParams {
    pub fn init(store: &mut ParamStore, rng: &Rng, name: &str, cfg: &LayerConfig) -> Result<Self> {
        Ok(Self {
            attn: MhaParams::init(store, rng, &format!("{name}.attn"), cfg)?,
            ffn: FfnParams::init(store, rng, &format!("{name}.ffn"), cfg)?,
            ln_attn: LayerNormParams::init(store, &format!("{name}.ln_attn"), cfg.width, cfg.ln_eps)?,
            ln_ffn: LayerNormParams::init(store, &format!("{name}.ln_ffn"), cfg.width, cfg.ln_eps)?,
        })
    }

    pub fn width(&self) -> usize {
        self.attn.width
    }

    pub fn param_count(&self) -> usize {
        self.attn.param_count() + self.ffn.param_count() + 4 * self.width()
    }
}

fn dims3(g: &Graph, x: Var) -> Result<[usize; 3]> {
    match *g.tape.shape(x) {
        [b, n, e] => Ok([b, n, e]),
        ref s => Err(Error::Contract(format!("expected a [B, N, E] tensor, got {s:?}"))),
    }
}

/// `[B, S, E] -> [B, H, S, hd]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let [b, s, e] = dims3(g, x)?;
    let x = g.tape.reshape(x, &[b, s, heads, e / heads])?;
    g.tape.permute(x, &[0, 2, 1, 3])
}

/// Scaled dot-product attention with `q_in` as queries and `kv_in` as keys
/// and values. With `causal`, query `i` only sees keys `j <= i`.
pub fn mha_forward(g: &mut Graph, q_in: Var, kv_in: Var, p: &MhaParams, causal: bool) -> Result<Var> {
    if p.n_heads == 0 || p.width % p.n_heads != 0 {
        return Err(Error::Config(format!(
            "{} heads do not divide width {}",
            p.n_heads, p.width
        )));
    }
    let [b, nq, e] = dims3(g, q_in)?;
    let [bk, nk, ek] = dims3(g, kv_in)?;
    if e != p.width || ek != p.width || b != bk {
        return Err(Error::shape("mha_forward", g.tape.shape(q_in), g.tape.shape(kv_in)));
    }
    if causal && nq != nk {
        return Err(Error::Contract(format!(
            "causal attention needs equal query/key lengths, got {nq} and {nk}"
        )));
    }
    let h = p.n_heads;
    let hd = e / h;

    let q = p.q.forward(g, q_in)?;
    let k = p.k.forward(g, kv_in)?;
    let v = p.v.forward(g, kv_in)?;
    let q = split_heads(g, q, h)?;
    let v = split_heads(g, v, h)?;
    // keys straight to [B, H, hd, Nk]
    let k = g.tape.reshape(k, &[b, nk, h, hd])?;
    let k = g.tape.permute(k, &[0, 2, 3, 1])?;

    let scores = g.tape.matmul(q, k)?;
    let mut scores = g.tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
    if causal {
        let mut mask = vec![0.0; nq * nk];
        for i in 0..nq {
            for j in i + 1..nk {
                mask[i * nk + j] = MASKED_SCORE;
            }
        }
        let m = g.constant(Tensor::new(&[nq, nk], mask)?);
        scores = g.tape.add(scores, m)?;
    }
    let attn = g.tape.softmax(scores, 3)?;
    let ctx = g.tape.matmul(attn, v)?;
    let ctx = g.tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.tape.reshape(ctx, &[b, nq, e])?;
    p.o.forward(g, ctx)
}

/// Pre-norm layer: `x + MHA(LN(x), memory)`, then `x + FFN(LN(x))`.
/// The memory is used as-is (not normalized by this layer).
pub fn cross_attn_layer_forward(
    g: &mut Graph,
    target: Var,
    memory: Var,
    p: &TransformerLayerParams,
) -> Result<Var> {
    let h = p.ln_attn.forward(g, target)?;
    let a = mha_forward(g, h, memory, &p.attn, false)?;
    let a = g.dropout(a)?;
    let x = g.tape.add(target, a)?;
    ffn_residual(g, x, p)
}

/// Pre-norm self-attention layer.
pub fn self_attn_layer_forward(g: &mut Graph, x: Var, p: &TransformerLayerParams, causal: bool) -> Result<Var> {
    let h = p.ln_attn.forward(g, x)?;
    let a = mha_forward(g, h, h, &p.attn, causal)?;
    let a = g.dropout(a)?;
    let x = g.tape.add(x, a)?;
    ffn_residual(g, x, p)
}

/// Causal pre-norm decoder block.
pub fn decoder_block_forward(g: &mut Graph, x: Var, p: &TransformerLayerParams) -> Result<Var> {
    self_attn_layer_forward(g, x, p, true)
}

fn ffn_residual(g: &mut Graph, x: Var, p: &TransformerLayerParams) -> Result<Var> {
    let h = p.ln_ffn.forward(g, x)?;
    let f = p.ffn.forward(g, h)?;
    let f = g.dropout(f)?;
    g.tape.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn setup(width: usize, heads: usize) -> (ParamStore, TransformerLayerParams) {
        let mut store = ParamStore::new();
        let cfg = LayerConfig::new(width, heads, 4);
        let p = TransformerLayerParams::init(&mut store, &Rng::new(10), "layer", &cfg).unwrap();
        // give biases and norms non-trivial values
        let mut rng = Rng::new(11);
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).rank() == 1 {
                let t = store.get_mut(id);
                for v in t.data_mut() {
                    *v += rng.uniform(-0.2, 0.2);
                }
            }
        }
        (store, p)
    }

    /// Per-head loop oracle for multi-head attention.
    fn mha_oracle(store: &ParamStore, p: &MhaParams, q_in: &Tensor, kv_in: &Tensor, causal: bool) -> Vec<f64> {
        let e = p.width;
        let (b, nq, nk) = (q_in.shape()[0], q_in.shape()[1], kv_in.shape()[1]);
        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.get(l.weight).data();
            (0..l.d_out)
                .map(|j| {
                    let mut s = l.bias.map_or(0.0, |bi| store.get(bi).data()[j]);
                    for i in 0..l.d_in {
                        s += x[i] * w[i * l.d_out + j];
                    }
                    s
                })
                .collect()
        };
        let hd = e / p.n_heads;
        let mut out = Vec::new();
        for bi in 0..b {
            let rows = |t: &Tensor, n: usize, i: usize| t.data()[(bi * n + i) * e..(bi * n + i + 1) * e].to_vec();
            let qs: Vec<Vec<f64>> = (0..nq).map(|i| lin(&p.q, &rows(q_in, nq, i))).collect();
            let ks: Vec<Vec<f64>> = (0..nk).map(|i| lin(&p.k, &rows(kv_in, nk, i))).collect();
            let vs: Vec<Vec<f64>> = (0..nk).map(|i| lin(&p.v, &rows(kv_in, nk, i))).collect();
            for i in 0..nq {
                let mut ctx = vec![0.0; e];
                for h in 0..p.n_heads {
                    let r = h * hd..(h + 1) * hd;
                    let limit = if causal { i + 1 } else { nk };
                    let scores: Vec<f64> = (0..limit)
                        .map(|j| {
                            qs[i][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        let w = (s - m).exp() / z;
                        for d in r.clone() {
                            ctx[d] += w * vs[j][d];
                        }
                    }
                }
                out.extend(lin(&p.o, &ctx));
            }
        }
        out
    }

    #[test]
    fn single_key_collapses_to_value_path() {
        let (store, p) = setup(8, 2);
        let mut rng = Rng::new(1);
        let kv = random(&[1, 1, 8], &mut rng);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let q = random(&[1, 3, 8], &mut rng);
            let mut g = Graph::new(&store);
            let (qv, kvv) = (g.tape.leaf(&q), g.tape.leaf(&kv));
            let y = mha_forward(&mut g, qv, kvv, &p.attn, false).unwrap();
            outs.push(g.tape.value(y).to_vec());
        }
        let v = {
            let a = &p.attn;
            let vproj = (0..8)
                .map(|j| {
                    store.get(a.v.bias.unwrap()).data()[j]
                        + (0..8).map(|i| kv.data()[i] * store.get(a.v.weight).data()[i * 8 + j]).sum::<f64>()
                })
                .collect::<Vec<_>>();
            (0..8)
                .map(|j| {
                    store.get(a.o.bias.unwrap()).data()[j]
                        + (0..8).map(|i| vproj[i] * store.get(a.o.weight).data()[i * 8 + j]).sum::<f64>()
                })
                .collect::<Vec<_>>()
        };
        for out in &outs {
            for t in 0..3 {
                for j in 0..8 {
                    assert!((out[t * 8 + j] - v[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mha_matches_loop_oracle() {
        let (store, p) = setup(8, 2);
        let mut rng = Rng::new(2);
        let q = random(&[1, 3, 8], &mut rng);
        let kv = random(&[1, 4, 8], &mut rng);
        let mut g = Graph::new(&store);
        let (qv, kvv) = (g.tape.leaf(&q), g.tape.leaf(&kv));
        let y = mha_forward(&mut g, qv, kvv, &p.attn, false).unwrap();
        let expect = mha_oracle(&store, &p.attn, &q, &kv, false);
        for (a, b) in g.tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn single_head_matches_reference() {
        let (store, p) = setup(8, 1);
        let mut rng = Rng::new(3);
        let q = random(&[2, 3, 8], &mut rng);
        let kv = random(&[2, 5, 8], &mut rng);
        let mut g = Graph::new(&store);
        let (qv, kvv) = (g.tape.leaf(&q), g.tape.leaf(&kv));
        let y = mha_forward(&mut g, qv, kvv, &p.attn, false).unwrap();
        let expect = mha_oracle(&store, &p.attn, &q, &kv, false);
        for (a, b) in g.tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn causal_matches_oracle_and_ignores_future() {
        let (store, p) = setup(8, 4);
        let mut rng = Rng::new(4);
        let x = random(&[1, 5, 8], &mut rng);
        let run = |x: &Tensor| {
            let mut g = Graph::new(&store);
            let xv = g.tape.leaf(x);
            let y = mha_forward(&mut g, xv, xv, &p.attn, true).unwrap();
            g.tape.value(y).to_vec()
        };
        let base = run(&x);
        let expect = mha_oracle(&store, &p.attn, &x, &x, true);
        for (a, b) in base.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10);
        }
        for t in 0..4 {
            let mut x2 = x.clone();
            for j in 0..8 {
                x2.data_mut()[(t + 1) * 8 + j] += 3.0;
            }
            let pert = run(&x2);
            for i in 0..(t + 1) * 8 {
                assert!((pert[i] - base[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let (store, p) = setup(8, 2);
        let mut g = Graph::new(&store);
        let q = g.tape.leaf(&Tensor::zeros(&[1, 2, 6]));
        let kv = g.tape.leaf(&Tensor::zeros(&[1, 2, 8]));
        assert!(matches!(mha_forward(&mut g, q, kv, &p.attn, false), Err(Error::Shape { .. })));
        let mut bad = p.attn.clone();
        bad.n_heads = 3;
        assert!(matches!(mha_forward(&mut g, kv, kv, &bad, false), Err(Error::Config(_))));
        assert!(LayerConfig::new(32, 5, 4).validate().is_err());
    }

    #[test]
    fn cross_layer_shape_and_memory_permutation() {
        let (store, p) = setup(32, 4);
        let mut rng = Rng::new(5);
        let target = random(&[2, 9, 32], &mut rng);
        let memory = random(&[2, 5, 32], &mut rng);
        let run = |m: &Tensor| {
            let mut g = Graph::new(&store);
            let (t, mv) = (g.tape.leaf(&target), g.tape.leaf(m));
            let y = cross_attn_layer_forward(&mut g, t, mv, &p).unwrap();
            (g.tape.shape(y).to_vec(), g.tape.value(y).to_vec())
        };
        let (shape, base) = run(&memory);
        assert_eq!(shape, vec![2, 9, 32]);
        let perm = [3, 0, 4, 2, 1];
        let mut permuted = memory.clone();
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..32 {
                    permuted.data_mut()[(b * 5 + dst) * 32 + j] = memory.data()[(b * 5 + src) * 32 + j];
                }
            }
        }
        let (_, out) = run(&permuted);
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let (mut store, p) = setup(16, 4);
        for id in [p.attn.o.weight, p.attn.o.bias.unwrap(), p.ffn.down.weight, p.ffn.down.bias.unwrap()] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = Rng::new(6);
        let target = random(&[2, 3, 16], &mut rng);
        let memory = random(&[2, 4, 16], &mut rng);
        let mut g = Graph::new(&store);
        let (t, m) = (g.tape.leaf(&target), g.tape.leaf(&memory));
        let y = cross_attn_layer_forward(&mut g, t, m, &p).unwrap();
        assert_eq!(g.tape.value(y), target.data());
    }

    #[test]
    fn decoder_block_single_token_and_causality() {
        let (store, p) = setup(16, 4);
        let mut rng = Rng::new(7);
        let x1 = random(&[1, 1, 16], &mut rng);
        let mut g = Graph::new(&store);
        let v = g.tape.leaf(&x1);
        let y = decoder_block_forward(&mut g, v, &p).unwrap();
        assert!(g.tape.value(y).iter().all(|v| v.is_finite()));

        let x = random(&[2, 4, 16], &mut rng);
        let run = |x: &Tensor| {
            let mut g = Graph::new(&store);
            let v = g.tape.leaf(x);
            let y = decoder_block_forward(&mut g, v, &p).unwrap();
            g.tape.value(y).to_vec()
        };
        let base = run(&x);
        let mut x2 = x.clone();
        for j in 0..16 {
            x2.data_mut()[2 * 16 + j] -= 1.5; // batch 0, position 2
        }
        let out = run(&x2);
        for i in 0..2 * 16 {
            assert!((out[i] - base[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropout_off_by_default_and_scales_when_on() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.tape.leaf(&Tensor::ones(&[1000]));
        assert_eq!(g.dropout(x).unwrap(), x);
        let mut g = Graph::new(&store).with_dropout(0.5, Rng::new(0));
        let x = g.tape.leaf(&Tensor::ones(&[1000]));
        let y = g.dropout(x).unwrap();
        assert!(g.tape.value(y).iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}
