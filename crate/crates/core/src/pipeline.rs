//! A miniature two-stage multimodal LM: frozen vision stub, linear adapter,
//! optional modulation adapter and a small causal decoder.
//!
//! Decoder input is `[visual N; instruction M; target L]`. Visual tokens get
//! no LM positional embedding (the vision stub already adds a frozen
//! per-token code); text tokens use positions `0..M+L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moda::{l1_mask_penalty, modulate, moda_forward, AuxLoss, ModaConfig, ModaParams, ModulationMask, Placement};
use crate::nn::{decoder_block_forward, LayerConfig, LayerNormParams, Linear, TransformerLayerParams};
use crate::synth::{EOS, PAD};
use crate::tensor::{xavier_uniform, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Label value for positions that carry no loss.
pub const IGNORE: usize = usize::MAX;

/// Standard deviation of the output-head initialization.
pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub vision_width: usize,
    pub n_visual: usize,
    pub vocab_size: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            vision_width: 48,
            n_visual: 16,
            vocab_size: 64,
            n_blocks: 4,
            n_heads: 4,
            ffn_mult: 4,
            max_seq: 64,
            ln_eps: 1e-5,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn layer(&self) -> LayerConfig {
        LayerConfig {
            width: self.width,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            attn_bias: true,
            ln_eps: self.ln_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer().validate()?;
        if self.vision_width == 0 || self.n_visual == 0 || self.vocab_size < 2 || self.n_blocks == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.n_visual >= self.max_seq {
            return Err(Error::Config("visual prefix leaves no room for text".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Frozen stand-in for a vision encoder: a fixed patch projection plus a
/// fixed per-token code.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionStub {
    pub proj: ParamId,
    pub pos: ParamId,
}

impl VisionStub {
    pub fn forward(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        let p = g.p(self.proj);
        let pos = g.p(self.pos);
        let y = g.tape.matmul(raw, p)?;
        g.tape.add(y, pos)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLm {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerLayerParams>,
    pub ln_f: LayerNormParams,
    pub head: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModaModule {
    pub config: ModaConfig,
    /// One per application site (one per block with `AllLayers`, unless shared).
    pub instances: Vec<ModaParams>,
}

impl ModaModule {
    fn for_site(&self, i: usize) -> &ModaParams {
        &self.instances[i.min(self.instances.len() - 1)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every modulation mask with ones.
    pub force_unit_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, N, E_v]`.
    pub image_feats: Tensor,
    /// `[B, M]`, row-major.
    pub instr_ids: Vec<usize>,
    pub instr_len: usize,
    /// `[B, L]`, row-major; `PAD` entries carry no loss.
    pub target_ids: Vec<usize>,
    pub target_len: usize,
}

impl Batch {
    pub fn new(image_feats: Tensor, instr_ids: Vec<usize>, instr_len: usize, target_ids: Vec<usize>, target_len: usize) -> Result<Self> {
        let b = match image_feats.shape() {
            [b, _, _] => *b,
            s => return Err(Error::Contract(format!("image features must be [B, N, E_v], got {s:?}"))),
        };
        if instr_ids.len() != b * instr_len || target_ids.len() != b * target_len {
            return Err(Error::shape(
                "batch",
                &[b, instr_len, target_len],
                &[instr_ids.len(), target_ids.len()],
            ));
        }
        Ok(Self {
            image_feats,
            instr_ids,
            instr_len,
            target_ids,
            target_len,
        })
    }

    pub fn size(&self) -> usize {
        self.image_feats.shape()[0]
    }

    /// True at padded target slots.
    pub fn padding_mask(&self) -> Vec<bool> {
        self.target_ids.iter().map(|t| *t == PAD).collect()
    }
}

pub struct ForwardOutput {
    /// `[B, N + M + T, V]`.
    pub logits: Var,
    /// Masks in application order (one per site).
    pub masks: Vec<ModulationMask>,
}

pub struct TrainOutput {
    /// Cross-entropy plus auxiliary loss.
    pub loss: Var,
    pub ce: Var,
    pub aux: Option<Var>,
    pub masks: Vec<ModulationMask>,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MllmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vision: VisionStub,
    pub adapter: Linear,
    pub lm: ToyLm,
    pub moda: Option<ModaModule>,
}

impl MllmModel {
    /// Builds vision stub, adapter and LM. Nothing is trainable until
    /// [`MllmModel::set_stage`] is called.
    pub fn new(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (ev, e, v) = (config.vision_width, config.width, config.vocab_size);

        let proj = store.register("vision.proj", xavier_uniform(&[ev, ev], &mut rng.child("vision.proj"))?)?;
        let mut pos_rng = rng.child("vision.pos");
        let pos_data = (0..config.n_visual * ev).map(|_| pos_rng.normal() / (ev as f64).sqrt() * 2.0).collect();
        let pos = store.register("vision.pos", Tensor::new(&[config.n_visual, ev], pos_data)?)?;

        let adapter = Linear::init(&mut store, rng, "adapter", ev, e, true)?;

        let tok_emb = store.register("lm.tok_emb", xavier_uniform(&[v, e], &mut rng.child("lm.tok_emb"))?)?;
        let pos_emb = store.register(
            "lm.pos_emb",
            xavier_uniform(&[config.max_seq, e], &mut rng.child("lm.pos_emb"))?,
        )?;
        let layer = config.layer();
        let blocks = (0..config.n_blocks)
            .map(|i| TransformerLayerParams::init(&mut store, rng, &format!("lm.block{i}"), &layer))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNormParams::init(&mut store, "lm.ln_f", e, config.ln_eps)?;
        let mut head_rng = rng.child("lm.head");
        let head_data = (0..e * v).map(|_| HEAD_INIT_STD * head_rng.normal()).collect();
        let head = store.register("lm.head", Tensor::new(&[e, v], head_data)?)?;

        Ok(Self {
            config: config.clone(),
            store,
            vision: VisionStub { proj, pos },
            adapter,
            lm: ToyLm {
                tok_emb,
                pos_emb,
                blocks,
                ln_f,
                head,
            },
            moda: None,
        })
    }

    /// Registers a freshly initialized modulation adapter under `moda.*`.
    pub fn attach_moda(&mut self, cfg: ModaConfig, rng: &Rng) -> Result<()> {
        if self.moda.is_some() {
            return Err(Error::Contract("model already has a modulation adapter".into()));
        }
        cfg.validate(self.config.width)?;
        let sites = match cfg.placement {
            Placement::Beginning => 1,
            Placement::AllLayers if cfg.share_across_blocks => 1,
            Placement::AllLayers => self.config.n_blocks,
        };
        let layer = cfg.layer_config(self.config.width, true, self.config.ln_eps);
        let instances = (0..sites)
            .map(|i| ModaParams::init(&mut self.store, rng, &format!("moda.{i}"), &cfg, &layer))
            .collect::<Result<Vec<_>>>()?;
        self.moda = Some(ModaModule { config: cfg, instances });
        Ok(())
    }

    /// Stage 1 trains only the adapter. Stage 2 trains the modulation
    /// adapter and the LM, plus the adapter when `train_adapter` is set.
    /// The vision stub is never trainable.
    pub fn set_stage(&mut self, stage: Stage, train_adapter: bool) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_trainable(id, false);
        }
        match stage {
            Stage::Stage1 => self.store.set_trainable_prefix("adapter.", true),
            Stage::Stage2 => {
                self.store.set_trainable_prefix("lm.", true);
                self.store.set_trainable_prefix("moda.", true);
                if train_adapter {
                    self.store.set_trainable_prefix("adapter.", true);
                }
            }
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(Error::Input(format!("token id {t} outside vocabulary of {}", self.config.vocab_size))),
            None => Ok(()),
        }
    }

    /// Token plus positional embedding of `[B, len]` ids at positions `0..len`.
    pub fn embed_text(&self, g: &mut Graph, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        self.check_ids(ids)?;
        if len > self.config.max_seq {
            return Err(Error::Input(format!("text of {len} tokens exceeds {}", self.config.max_seq)));
        }
        let table = g.p(self.lm.tok_emb);
        let tok = g.tape.embedding(table, ids, &[batch, len])?;
        let pos_table = g.p(self.lm.pos_emb);
        let pos = g.tape.slice(pos_table, 0, 0, len)?;
        g.tape.add(tok, pos)
    }

    /// The instruction embeddings `T` fed to the modulation adapter.
    pub fn embed_instruction(&self, g: &mut Graph, instr_ids: &[usize], batch: usize) -> Result<Var> {
        if batch == 0 || instr_ids.len() % batch != 0 {
            return Err(Error::Input(format!("{} instruction ids for batch {batch}", instr_ids.len())));
        }
        self.embed_text(g, instr_ids, batch, instr_ids.len() / batch)
    }

    /// Adapter output `V_aligned` for raw features `[B, N, E_v]`.
    pub fn align(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let c = &self.config;
        match image.shape() {
            [_, n, ev] if *n == c.n_visual && *ev == c.vision_width => {}
            s => {
                return Err(Error::shape("align", s, &[c.n_visual, c.vision_width]));
            }
        }
        let raw = g.tape.leaf(image);
        let feats = self.vision.forward(g, raw)?;
        self.adapter.forward(g, feats)
    }

    fn apply_moda(
        &self,
        g: &mut Graph,
        moda: &ModaModule,
        site: usize,
        v: Var,
        t: Var,
        opts: ForwardOptions,
    ) -> Result<(Var, ModulationMask)> {
        if opts.force_unit_mask {
            let ones = g.constant(Tensor::ones(g.tape.shape(v)));
            let mask = ModulationMask { values: ones, logits: ones };
            return Ok((modulate(g, v, &mask)?, mask));
        }
        moda_forward(g, v, Some(t), moda.for_site(site), &moda.config)
    }

    /// Logits for the sequence `[visual; instruction; text]`, where `text`
    /// holds `text_len` tokens per sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: &Tensor,
        instr_ids: &[usize],
        text_ids: &[usize],
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let b = image.shape().first().copied().unwrap_or(0);
        if b == 0 || instr_ids.len() % b != 0 || text_ids.len() % b != 0 {
            return Err(Error::Input("token ids do not divide into the batch".into()));
        }
        let (m, l) = (instr_ids.len() / b, text_ids.len() / b);
        if m == 0 {
            return Err(Error::Input("empty instruction".into()));
        }
        let n = c.n_visual;
        if n + m + l > c.max_seq {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds the maximum of {}",
                n + m + l,
                c.max_seq
            )));
        }
        let mut ids = Vec::with_capacity(b * (m + l));
        for i in 0..b {
            ids.extend_from_slice(&instr_ids[i * m..(i + 1) * m]);
            ids.extend_from_slice(&text_ids[i * l..(i + 1) * l]);
        }
        let text = self.embed_text(g, &ids, b, m + l)?;
        let t = g.tape.slice(text, 1, 0, m)?;

        let mut v = self.align(g, image)?;
        let mut masks = Vec::new();
        let per_block = match &self.moda {
            Some(moda) if moda.config.placement == Placement::Beginning => {
                let (out, mask) = self.apply_moda(g, moda, 0, v, t, opts)?;
                v = out;
                masks.push(mask);
                false
            }
            Some(_) => true,
            None => false,
        };
        let mut x = g.tape.concat(&[v, text], 1)?;
        for (i, block) in self.lm.blocks.iter().enumerate() {
            if per_block {
                let moda = self.moda.as_ref().expect("per-block placement implies a module");
                let vis = g.tape.slice(x, 1, 0, n)?;
                let rest = g.tape.slice(x, 1, n, m + l)?;
                let (vis, mask) = self.apply_moda(g, moda, i, vis, t, opts)?;
                masks.push(mask);
                x = g.tape.concat(&[vis, rest], 1)?;
            }
            x = decoder_block_forward(g, x, block)?;
        }
        let x = self.lm.ln_f.forward(g, x)?;
        let head = g.p(self.lm.head);
        let logits = g.tape.matmul(x, head)?;
        Ok(ForwardOutput { logits, masks })
    }

    /// Teacher-forced loss: target token `i` is predicted from position
    /// `N + M - 1 + i`; padded targets are ignored.
    pub fn forward_train(&self, g: &mut Graph, batch: &Batch, opts: ForwardOptions) -> Result<TrainOutput> {
        let (b, m, l) = (batch.size(), batch.instr_len, batch.target_len);
        let out = self.forward(g, &batch.image_feats, &batch.instr_ids, &batch.target_ids, opts)?;
        let s = self.config.n_visual + m + l;
        let v = self.config.vocab_size;
        let mut labels = vec![IGNORE; b * s];
        for i in 0..b {
            for j in 0..l {
                let t = batch.target_ids[i * l + j];
                if t != PAD {
                    labels[i * s + self.config.n_visual + m - 1 + j] = t;
                }
            }
        }
        let flat = g.tape.reshape(out.logits, &[b * s, v])?;
        let ce = g.tape.cross_entropy(flat, &labels, IGNORE)?;
        let aux = match &self.moda {
            Some(moda) if !opts.force_unit_mask => match moda.config.aux_loss {
                AuxLoss::L1 { weight } => {
                    let mut total: Option<Var> = None;
                    for mask in &out.masks {
                        let p = l1_mask_penalty(g, mask, weight, moda.config.penalty_target)?;
                        total = Some(match total {
                            Some(acc) => g.tape.add(acc, p)?,
                            None => p,
                        });
                    }
                    match total {
                        Some(t) => Some(g.tape.scale(t, 1.0 / out.masks.len() as f64)?),
                        None => None,
                    }
                }
                AuxLoss::None => None,
            },
            _ => None,
        };
        let loss = match aux {
            Some(a) => g.tape.add(ce, a)?,
            None => ce,
        };
        Ok(TrainOutput {
            loss,
            ce,
            aux,
            masks: out.masks,
            logits: out.logits,
        })
    }

    /// Greedy decoding. Each returned sequence stops before EOS or after
    /// `max_new_tokens`; ties go to the lowest token id.
    pub fn generate(&self, image: &Tensor, instr_ids: &[usize], max_new_tokens: usize) -> Result<Vec<Vec<usize>>> {
        let b = image.shape().first().copied().unwrap_or(0);
        let v = self.config.vocab_size;
        let mut text: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for _ in 0..max_new_tokens {
            if done.iter().all(|d| *d) {
                break;
            }
            let flat: Vec<usize> = text.iter().flatten().copied().collect();
            let mut g = Graph::new(&self.store);
            let out = self.forward(&mut g, image, instr_ids, &flat, ForwardOptions::default())?;
            let s = g.tape.shape(out.logits)[1];
            let logits = g.tape.value(out.logits);
            for i in 0..b {
                let row = &logits[(i * s + s - 1) * v..(i * s + s) * v];
                let best = argmax(row);
                // finished rows keep growing with EOS so the batch stays rectangular
                text[i].push(if done[i] { EOS } else { best });
                if best == EOS {
                    done[i] = true;
                }
            }
        }
        Ok(text
            .into_iter()
            .map(|t| t.into_iter().take_while(|&id| id != EOS).collect())
            .collect())
    }

    /// Modulation masks for each application site, as `[B, N, E]` tensors.
    pub fn masks(&self, image: &Tensor, instr_ids: &[usize]) -> Result<Vec<Tensor>> {
        if self.moda.is_none() {
            return Err(Error::Unsupported("model has no modulation adapter".into()));
        }
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, image, instr_ids, &[], ForwardOptions::default())?;
        Ok(out.masks.iter().map(|m| m.to_tensor(&g)).collect())
    }

    pub fn trainable_count(&self) -> usize {
        self.store.iter().filter(|(_, _, t)| t.requires_grad()).map(|(_, _, t)| t.numel()).sum()
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moda::ModaVariant;

    fn micro() -> ModelConfig {
        ModelConfig {
            width: 8,
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

    fn small_moda(placement: Placement) -> ModaConfig {
        ModaConfig {
            n_heads: 2,
            placement,
            ..ModaConfig::reference()
        }
    }

    fn random_batch(cfg: &ModelConfig, b: usize, m: usize, l: usize, seed: u64) -> Batch {
        let mut rng = Rng::new(seed);
        let img = (0..b * cfg.n_visual * cfg.vision_width).map(|_| rng.normal()).collect();
        let image = Tensor::new(&[b, cfg.n_visual, cfg.vision_width], img).unwrap();
        let instr = (0..b * m).map(|_| 2 + rng.below(cfg.vocab_size - 2)).collect();
        let target = (0..b * l).map(|_| 2 + rng.below(cfg.vocab_size - 2)).collect();
        Batch::new(image, instr, m, target, l).unwrap()
    }

    fn loss_of(model: &MllmModel, batch: &Batch, opts: ForwardOptions) -> f64 {
        let mut g = Graph::new(&model.store);
        let out = model.forward_train(&mut g, batch, opts).unwrap();
        g.tape.scalar_value(out.loss)
    }

    #[test]
    fn init_loss_is_near_uniform() {
        let cfg = ModelConfig::default();
        let model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        let batch = random_batch(&cfg, 8, 3, 2, 1);
        let loss = loss_of(&model, &batch, ForwardOptions::default());
        let ln_v = (cfg.vocab_size as f64).ln();
        assert!(loss.is_finite() && loss > 0.0);
        assert!((loss - ln_v).abs() <= 0.1 * ln_v, "loss {loss} vs ln V {ln_v}");
    }

    #[test]
    fn instruction_embedding_is_a_table_lookup() {
        let cfg = micro();
        let model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        let mut g = Graph::new(&model.store);
        let ids = [3usize, 5, 3, 5];
        let t = model.embed_instruction(&mut g, &ids, 2).unwrap();
        let vals = g.tape.value(t).to_vec();
        assert_eq!(vals[..16], vals[16..]);
        let tok = model.store.get(model.lm.tok_emb).data();
        let pos = model.store.get(model.lm.pos_emb).data();
        for (p, id) in [3usize, 5].iter().enumerate() {
            for k in 0..8 {
                assert_eq!(vals[p * 8 + k], tok[id * 8 + k] + pos[p * 8 + k]);
            }
        }
        assert!(matches!(model.embed_instruction(&mut g, &[10, 2], 1), Err(Error::Input(_))));
    }

    #[test]
    fn embedding_gradient_only_touches_used_rows() {
        let cfg = micro();
        let mut model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        model.set_stage(Stage::Stage2, true);
        let ids = [3usize, 5];
        let weights: Vec<f64> = (0..16).map(|i| ((i + 1) as f64 * 0.37).sin()).collect();
        let objective = |store: &ParamStore| -> (f64, Option<Vec<f64>>) {
            let model = MllmModel { store: store.clone(), ..model.clone() };
            let mut g = Graph::new(&model.store);
            let t = model.embed_instruction(&mut g, &ids, 1).unwrap();
            let w = g.constant(Tensor::new(&[1, 2, 8], weights.clone()).unwrap());
            let y = g.tape.mul(t, w).unwrap();
            let s = g.tape.sum(y).unwrap();
            let value = g.tape.scalar_value(s);
            let grads = g.backward(s).unwrap();
            let grad = grads.params().find(|(id, _)| *id == model.lm.tok_emb).map(|(_, g)| g.to_vec());
            (value, grad)
        };
        let (_, grad) = objective(&model.store);
        let grad = grad.unwrap();
        for (row, expect_nonzero) in [(3usize, true), (7, false)] {
            for k in 0..8 {
                let idx = row * 8 + k;
                let mut up = model.store.clone();
                up.get_mut(model.lm.tok_emb).data_mut()[idx] += 1e-6;
                let mut dn = model.store.clone();
                dn.get_mut(model.lm.tok_emb).data_mut()[idx] -= 1e-6;
                let numeric = (objective(&up).0 - objective(&dn).0) / 2e-6;
                assert!((grad[idx] - numeric).abs() <= 1e-6);
                assert_eq!(grad[idx] != 0.0, expect_nonzero);
            }
        }
    }

    #[test]
    fn unit_mask_matches_moda_free_model() {
        let cfg = micro();
        let base = MllmModel::new(&cfg, &Rng::new(4)).unwrap();
        for placement in [Placement::Beginning, Placement::AllLayers] {
            let mut with = base.clone();
            with.attach_moda(small_moda(placement), &Rng::new(5)).unwrap();
            let batch = random_batch(&cfg, 3, 2, 2, 6);
            let opts = ForwardOptions { force_unit_mask: true };
            let mut g1 = Graph::new(&base.store);
            let a = base.forward_train(&mut g1, &batch, ForwardOptions::default()).unwrap();
            let mut g2 = Graph::new(&with.store);
            let b = with.forward_train(&mut g2, &batch, opts).unwrap();
            assert_eq!(g1.tape.value(a.logits), g2.tape.value(b.logits));
            assert_eq!(g1.tape.scalar_value(a.loss), g2.tape.scalar_value(b.loss));
            // and the real mask does change things
            assert_ne!(loss_of(&with, &batch, ForwardOptions::default()), g1.tape.scalar_value(a.loss));
        }
    }

    #[test]
    fn all_layers_has_one_instance_per_block() {
        let cfg = ModelConfig { n_blocks: 3, ..micro() };
        let mut model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        model.attach_moda(small_moda(Placement::AllLayers), &Rng::new(1)).unwrap();
        assert_eq!(model.moda.as_ref().unwrap().instances.len(), 3);
        let batch = random_batch(&cfg, 2, 1, 1, 0);
        let mut g = Graph::new(&model.store);
        let out = model.forward_train(&mut g, &batch, ForwardOptions::default()).unwrap();
        assert_eq!(out.masks.len(), 3);

        let mut shared = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        let mc = ModaConfig {
            share_across_blocks: true,
            ..small_moda(Placement::AllLayers)
        };
        shared.attach_moda(mc, &Rng::new(1)).unwrap();
        assert_eq!(shared.moda.as_ref().unwrap().instances.len(), 1);
        let mut g = Graph::new(&shared.store);
        assert_eq!(shared.forward_train(&mut g, &batch, ForwardOptions::default()).unwrap().masks.len(), 3);
    }

    #[test]
    fn causal_consistency_at_answer_positions() {
        let cfg = micro();
        let mut model = MllmModel::new(&cfg, &Rng::new(2)).unwrap();
        model.attach_moda(small_moda(Placement::Beginning), &Rng::new(3)).unwrap();
        let batch = random_batch(&cfg, 1, 2, 3, 1);
        let mut other = batch.clone();
        other.target_ids[2] = (other.target_ids[2] + 1) % cfg.vocab_size;
        let logits = |b: &Batch| {
            let mut g = Graph::new(&model.store);
            let out = model.forward(&mut g, &b.image_feats, &b.instr_ids, &b.target_ids, ForwardOptions::default()).unwrap();
            g.tape.value(out.logits).to_vec()
        };
        let (a, b) = (logits(&batch), logits(&other));
        let v = cfg.vocab_size;
        // positions up to and including the one that reads target[1]
        let upto = cfg.n_visual + 2 + 2;
        assert_eq!(a[..upto * v], b[..upto * v]);
        assert_ne!(a[upto * v..], b[upto * v..]);
    }

    #[test]
    fn sequence_length_and_vocab_checked() {
        let cfg = micro();
        let model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        let batch = random_batch(&cfg, 1, 3, 4, 0);
        let mut g = Graph::new(&model.store);
        assert!(matches!(
            model.forward_train(&mut g, &batch, ForwardOptions::default()),
            Err(Error::Input(_))
        ));
        let mut bad = random_batch(&cfg, 1, 2, 2, 0);
        bad.instr_ids[0] = 99;
        assert!(matches!(
            model.forward_train(&mut g, &bad, ForwardOptions::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn padding_is_excluded_from_loss() {
        let cfg = micro();
        let model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        let batch = random_batch(&cfg, 1, 2, 2, 3);
        let mut padded = batch.clone();
        padded.target_ids.push(PAD);
        padded.target_len = 3;
        assert_eq!(padded.padding_mask(), vec![false, false, true]);
        let a = loss_of(&model, &batch, ForwardOptions::default());
        let b = loss_of(&model, &padded, ForwardOptions::default());
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn generation_is_deterministic_and_follows_a_rigged_head() {
        let cfg = micro();
        let mut model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        let batch = random_batch(&cfg, 2, 2, 1, 0);
        let a = model.generate(&batch.image_feats, &batch.instr_ids, 3).unwrap();
        let b = model.generate(&batch.image_feats, &batch.instr_ids, 3).unwrap();
        assert_eq!(a, b);

        let head = model.lm.head;
        let h = model.store.get_mut(head).data_mut();
        h.fill(0.0);
        for k in 0..cfg.width {
            h[k * cfg.vocab_size + 7] = 50.0;
        }
        let model2 = model.clone();
        // the final norm output has zero mean, so give its bias a push too
        let mut model3 = model2.clone();
        let bias = model3.lm.ln_f.bias;
        model3.store.get_mut(bias).data_mut().fill(1.0);
        let out = model3.generate(&batch.image_feats, &batch.instr_ids, 4).unwrap();
        assert_eq!(out, vec![vec![7; 4]; 2]);

        // EOS wins immediately: empty output
        let h = model3.store.get_mut(head).data_mut();
        h.fill(0.0);
        for k in 0..cfg.width {
            h[k * cfg.vocab_size + EOS] = 50.0;
        }
        assert_eq!(model3.generate(&batch.image_feats, &batch.instr_ids, 4).unwrap(), vec![Vec::<usize>::new(); 2]);
    }

    #[test]
    fn stage_flags() {
        let cfg = micro();
        let mut model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        model.attach_moda(small_moda(Placement::Beginning), &Rng::new(1)).unwrap();
        model.set_stage(Stage::Stage1, true);
        for (_, name, t) in model.store.iter() {
            assert_eq!(t.requires_grad(), name.starts_with("adapter."), "{name}");
        }
        for train_adapter in [true, false] {
            model.set_stage(Stage::Stage2, train_adapter);
            for (_, name, t) in model.store.iter() {
                let want = name.starts_with("lm.") || name.starts_with("moda.") || (train_adapter && name.starts_with("adapter."));
                assert_eq!(t.requires_grad(), want, "{name}");
            }
        }
    }

    #[test]
    fn masks_need_a_moda_module() {
        let cfg = micro();
        let mut model = MllmModel::new(&cfg, &Rng::new(0)).unwrap();
        let batch = random_batch(&cfg, 2, 2, 1, 0);
        assert!(matches!(model.masks(&batch.image_feats, &batch.instr_ids), Err(Error::Unsupported(_))));
        model
            .attach_moda(ModaConfig { variant: ModaVariant::MlpVisualOnly, ..small_moda(Placement::Beginning) }, &Rng::new(1))
            .unwrap();
        let m = model.masks(&batch.image_feats, &batch.instr_ids).unwrap();
        assert_eq!(m[0].shape(), &[2, 2, 8]);
        assert!(m[0].data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}
