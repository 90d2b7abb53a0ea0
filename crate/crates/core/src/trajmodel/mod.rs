//! The autoregressive policy: summed element embeddings, a GPT-2 style
//! pre-LN transformer over interleaved (R, s, a) tokens, and a 9-way action head.

mod generate;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::netgrid::{EnvState, Network, NUM_ACTIONS};
use crate::numcore::{randn, rng_for, Graph, ParamStore, Rng, Tensor, Var};
use crate::tokenizer::{ContextWindow, VocabSpec};

pub use generate::{contexts_from, generate, generate_corpus, sample_action, GenerationContext};

pub const CHECKPOINT_KIND: &str = "policy";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context length K in steps; the token sequence is 3·K long.
    pub context: usize,
    pub dropout: f64,
    pub max_timestep: usize,
    pub init_std: f64,
    /// Round the position vocabulary up to a power of two.
    pub pad_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context: 12,
            dropout: 0.1,
            max_timestep: 64,
            init_std: 0.02,
            pad_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.context == 0 {
            return bad("model.context must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout {} not in [0, 1)", self.dropout));
        }
        if self.max_timestep == 0 {
            return bad("model.max_timestep must be at least 1".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("model.init_std must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    ln1: (usize, usize),
    wq: (usize, usize),
    wk: (usize, usize),
    wv: (usize, usize),
    wo: (usize, usize),
    ln2: (usize, usize),
    w1: (usize, usize),
    w2: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    pos: usize,
    origin: usize,
    dest: usize,
    depart: usize,
    speed: usize,
    user: usize,
    action: usize,
    rtg: usize,
    time: usize,
    ln_emb: (usize, usize),
    layers: Vec<LayerIds>,
    ln_f: (usize, usize),
    head: (usize, usize),
}

/// Parameter store in canonical order. Weights are `N(0, init_std)`, the two
/// residual projections per layer are scaled down by `sqrt(2·n_layers)`.
fn init_params(cfg: &ModelConfig, vocab: &VocabSpec, rng: &mut Rng) -> (ParamStore, ParamIds) {
    let d = cfg.d_model;
    let std = cfg.init_std;
    let resid_std = std / ((2 * cfg.n_layers.max(1)) as f64).sqrt();
    let mut s = ParamStore::new();
    let emb = |s: &mut ParamStore, name: &str, rows: usize, rng: &mut Rng| {
        s.push(name, randn(&[rows, d], std, rng))
    };
    let pos = emb(&mut s, "emb.position", vocab.positions, rng);
    let origin = emb(&mut s, "emb.origin", vocab.positions, rng);
    let dest = emb(&mut s, "emb.destination", vocab.positions, rng);
    let depart = emb(&mut s, "emb.depart", vocab.depart_bins, rng);
    let speed = emb(&mut s, "emb.speed", vocab.speed_bins, rng);
    let user = emb(&mut s, "emb.user", vocab.users, rng);
    let action = emb(&mut s, "emb.action", vocab.actions, rng);
    let rtg = emb(&mut s, "emb.rtg", vocab.rtg, rng);
    let time = emb(&mut s, "emb.timestep", vocab.max_timestep, rng);
    let ln = |s: &mut ParamStore, name: &str| {
        (
            s.push(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            s.push(format!("{name}.bias"), Tensor::zeros(&[d])),
        )
    };
    let ln_emb = ln(&mut s, "ln_emb");
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let lin = |s: &mut ParamStore, name: &str, i: usize, o: usize, std: f64, rng: &mut Rng| {
            (
                s.push(format!("layer{l}.{name}.weight"), randn(&[i, o], std, rng)),
                s.push(format!("layer{l}.{name}.bias"), Tensor::zeros(&[o])),
            )
        };
        let ln1 = ln(&mut s, &format!("layer{l}.ln1"));
        let wq = lin(&mut s, "attn.q", d, d, std, rng);
        let wk = lin(&mut s, "attn.k", d, d, std, rng);
        let wv = lin(&mut s, "attn.v", d, d, std, rng);
        let wo = lin(&mut s, "attn.out", d, d, resid_std, rng);
        let ln2 = ln(&mut s, &format!("layer{l}.ln2"));
        let w1 = lin(&mut s, "ffn.up", d, 4 * d, std, rng);
        let w2 = lin(&mut s, "ffn.down", 4 * d, d, resid_std, rng);
        layers.push(LayerIds {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            w1,
            w2,
        });
    }
    let ln_f = ln(&mut s, "ln_f");
    let head = (
        s.push("head.weight", randn(&[d, NUM_ACTIONS], std, rng)),
        s.push("head.bias", Tensor::zeros(&[NUM_ACTIONS])),
    );
    let ids = ParamIds {
        pos,
        origin,
        dest,
        depart,
        speed,
        user,
        action,
        rtg,
        time,
        ln_emb,
        layers,
        ln_f,
        head,
    };
    (s, ids)
}

/// Output of a full forward pass over one window.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[T, 9]` action logits read at each step's state token.
    pub logits: Tensor,
    /// `attention[layer][head]` is a `[3T, 3T]` row-stochastic lower-triangular matrix.
    pub attention: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub cfg: ModelConfig,
    pub vocab: VocabSpec,
    pub params: ParamStore,
    ids: ParamIds,
}

/// Row indices, targets and feasibility masks of a window's decision steps.
#[derive(Debug, Clone, Default)]
pub struct DecisionRows {
    pub steps: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl DecisionRows {
    pub fn of(w: &ContextWindow, net: &Network) -> Self {
        let mut out = Self::default();
        for (t, s) in w.steps.iter().enumerate() {
            if let Some(a) = s.action {
                out.steps.push(t);
                out.targets.push(a.index());
                out.mask
                    .extend_from_slice(&net.feasible_mask(s.state.position));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl PolicyModel {
    pub fn new(cfg: ModelConfig, vocab: VocabSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab.max_timestep != cfg.max_timestep {
            return Err(Error::Config(format!(
                "vocabulary max_timestep {} differs from model.max_timestep {}",
                vocab.max_timestep, cfg.max_timestep
            )));
        }
        let (params, ids) = init_params(&cfg, &vocab, &mut rng_for(seed, 0));
        Ok(Self {
            cfg,
            vocab,
            params,
            ids,
        })
    }

    /// Sum of the six state-element embedding rows, before the timestep embedding and normalisation.
    pub fn embed_state(&self, s: &EnvState) -> Result<Vec<f64>> {
        self.vocab.check_state(s)?;
        let p = &self.params;
        let id = &self.ids;
        let rows = [
            (id.pos, s.position),
            (id.origin, s.origin),
            (id.dest, s.destination),
            (id.depart, s.depart_bin),
            (id.speed, s.speed_bin),
            (id.user, s.user_id),
        ];
        let mut out = vec![0.0; self.cfg.d_model];
        for (table, i) in rows {
            for (o, v) in out.iter_mut().zip(p.get(table).row(i)) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Index of the user-embedding table in the parameter store.
    pub fn user_embedding_id(&self) -> usize {
        self.ids.user
    }

    pub fn user_embeddings(&self) -> &Tensor {
        self.params.get(self.ids.user)
    }

    /// Record the forward pass for `w` on `g`. Returns logits for the steps in
    /// `rows` (shape `[rows.len(), 9]`) and the attention node of every layer.
    /// Dropout is active only when `rng` is given.
    pub fn build<'p>(
        &'p self,
        g: &mut Graph<'p>,
        w: &ContextWindow,
        rows: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        let t_len = w.len();
        if t_len == 0 || t_len > self.cfg.context {
            return Err(Error::Argument(format!(
                "window of {t_len} steps, context holds 1..={}",
                self.cfg.context
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t_len) {
            return Err(Error::Index {
                what: "window step",
                index: bad,
                size: t_len,
            });
        }
        for s in w.steps {
            self.vocab.check_state(&s.state)?;
        }
        let p = &self.params;
        let id = &self.ids;
        let col = |f: &dyn Fn(&crate::tokenizer::StepTokens) -> usize| {
            w.steps.iter().map(f).collect::<Vec<usize>>()
        };
        let lookup = |g: &mut Graph<'p>, table: usize, idx: &[usize]| -> Result<Var> {
            let t = g.param(p, table);
            g.embedding(t, idx)
        };

        let mut s = lookup(g, id.pos, &col(&|s| s.state.position))?;
        for (table, idx) in [
            (id.origin, col(&|s| s.state.origin)),
            (id.dest, col(&|s| s.state.destination)),
            (id.depart, col(&|s| s.state.depart_bin)),
            (id.speed, col(&|s| s.state.speed_bin)),
            (id.user, col(&|s| s.state.user_id)),
        ] {
            let e = lookup(g, table, &idx)?;
            s = g.add(s, e)?;
        }
        let steps: Vec<usize> = (0..t_len)
            .map(|i| self.vocab.timestep_index(w.start + i))
            .collect();
        let time = lookup(g, id.time, &steps)?;
        let r = lookup(g, id.rtg, &col(&|s| s.rtg as usize))?;
        let a = lookup(g, id.action, &col(&|s| s.action_token()))?;
        let r = g.add(r, time)?;
        let s = g.add(s, time)?;
        let a = g.add(a, time)?;
        let x = g.interleave3(r, s, a)?;
        let mut x = self.layer_norm(g, x, id.ln_emb)?;
        let rate = self.cfg.dropout;
        let dropout =
            |g: &mut Graph<'p>, x: Var, rng: &mut Option<&mut Rng>| match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => g.dropout(x, rate, r),
                _ => x,
            };
        x = dropout(g, x, &mut rng);

        let mut attn = Vec::with_capacity(id.layers.len());
        for l in &id.layers {
            let h = self.layer_norm(g, x, l.ln1)?;
            let q = self.linear(g, h, l.wq)?;
            let k = self.linear(g, h, l.wk)?;
            let v = self.linear(g, h, l.wv)?;
            let z = g.causal_attention(q, k, v, self.cfg.n_heads)?;
            attn.push(z);
            let o = self.linear(g, z, l.wo)?;
            let o = dropout(g, o, &mut rng);
            x = g.add(x, o)?;
            let h = self.layer_norm(g, x, l.ln2)?;
            let f = self.linear(g, h, l.w1)?;
            let f = g.gelu(f);
            let f = self.linear(g, f, l.w2)?;
            let f = dropout(g, f, &mut rng);
            x = g.add(x, f)?;
        }
        let x = self.layer_norm(g, x, id.ln_f)?;
        let state_rows: Vec<usize> = rows.iter().map(|&t| 3 * t + 1).collect();
        let x = g.select_rows(x, &state_rows)?;
        Ok((self.linear(g, x, id.head)?, attn))
    }

    fn layer_norm<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        (gain, bias): (usize, usize),
    ) -> Result<Var> {
        let gv = g.param(&self.params, gain);
        let bv = g.param(&self.params, bias);
        g.layer_norm(x, gv, bv)
    }

    fn linear<'p>(&'p self, g: &mut Graph<'p>, x: Var, (w, b): (usize, usize)) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let bv = g.param(&self.params, b);
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    /// Inference forward pass: logits for every step plus all attention maps.
    pub fn forward(&self, w: &ContextWindow) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let rows: Vec<usize> = (0..w.len()).collect();
        let (logits, attn) = self.build(&mut g, w, &rows, None)?;
        let attention = attn
            .iter()
            .map(|&v| g.attention_probs(v).expect("attention node").to_vec())
            .collect();
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            attention,
        })
    }

    /// Logits at the last step of `w`, without keeping attention maps.
    pub fn last_logits(&self, w: &ContextWindow) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (logits, _) = self.build(&mut g, w, &[w.len() - 1], None)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Records `Σ weight · (−log π(a_t))` over the decision steps of `w`, with the
    /// softmax restricted to feasible actions. `None` when `w` has no decision.
    pub fn nll_graph<'p>(
        &'p self,
        g: &mut Graph<'p>,
        w: &ContextWindow,
        net: &Network,
        weight: f64,
        rng: Option<&mut Rng>,
    ) -> Result<Option<Var>> {
        let d = DecisionRows::of(w, net);
        if d.is_empty() {
            return Ok(None);
        }
        let (logits, _) = self.build(g, w, &d.steps, rng)?;
        let weights = vec![weight; d.len()];
        Ok(Some(g.cross_entropy(
            logits,
            &d.targets,
            &weights,
            Some(&d.mask),
        )?))
    }

    /// Mean feasible-masked cross-entropy over the decision steps of `w`.
    pub fn nll_loss(&self, w: &ContextWindow, net: &Network) -> Result<f64> {
        let n = w.num_decisions();
        let mut g = Graph::new();
        match self.nll_graph(&mut g, w, net, 1.0 / n.max(1) as f64, None)? {
            Some(v) => Ok(g.scalar(v)),
            None => Err(Error::Argument("window has no decision step".into())),
        }
    }

    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        checkpoint::save(
            path,
            CHECKPOINT_KIND,
            self.header_config(),
            meta,
            &self.params,
        )
    }

    pub fn to_bytes(&self, meta: Value) -> Result<Vec<u8>> {
        checkpoint::to_bytes(CHECKPOINT_KIND, self.header_config(), meta, &self.params)
    }

    fn header_config(&self) -> Value {
        serde_json::json!({ "model": self.cfg, "vocab": self.vocab })
    }

    /// Load a checkpoint; with `expect_vocab`, a differing vocabulary is an error.
    pub fn load(path: &Path, expect_vocab: Option<&VocabSpec>) -> Result<(Self, Value)> {
        let (header, params) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let cfg: ModelConfig = serde_json::from_value(header.config["model"].clone())
            .map_err(|e| fail(format!("bad model config: {e}")))?;
        let vocab: VocabSpec = serde_json::from_value(header.config["vocab"].clone())
            .map_err(|e| fail(format!("bad vocab spec: {e}")))?;
        if let Some(v) = expect_vocab {
            if *v != vocab {
                return Err(fail(format!(
                    "vocabulary mismatch: checkpoint {vocab:?}, expected {v:?}"
                )));
            }
        }
        let mut model = Self::new(cfg, vocab, 0).map_err(|e| fail(e.to_string()))?;
        checkpoint::check_layout(path, &params, &model.params)?;
        model.params = params;
        Ok((model, header.meta))
    }
}
