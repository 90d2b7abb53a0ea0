//! Reward-model fine-tuning: rollouts scored by the critic's recovered reward,
//! a TD-trained state value model, GAE advantages and a conservative update
//! `L_sup − α·Ê[Â log π] + β·KL(π ‖ π_ref)`.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::netgrid::{EnvState, Network, NUM_ACTIONS};
use crate::numcore::{
    accumulate, clip_global_norm, derive_seed, randn, rng_for, AdamW, Graph, ParamStore, Tensor,
    Var,
};
use crate::par;
use crate::pretrain::{
    batch_grads, encode_all, eval_policy, rows_from, scoring_windows, training_windows, CHUNK,
};
use crate::rewardirl::{trajectory_rewards, transitions, CriticModel};
use crate::synthgen::{Dataset, Status, Trajectory};
use crate::tokenizer::{encode_episode, ContextWindow, EpisodeTokens, VocabSpec};
use crate::trajmodel::{contexts_from, generate, GenerationContext, PolicyModel};

pub const VALUE_CHECKPOINT_KIND: &str = "value";
pub const ADV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Weight of the supervised expert loss.
    pub supervised_weight: f64,
    pub iterations: usize,
    pub rollouts: usize,
    pub max_len: usize,
    pub policy_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub supervised_batch: usize,
    pub value_lr: f64,
    pub value_epochs: usize,
    pub value_batch: usize,
    pub reuse: RolloutReuse,
}

/// What rollouts keep from one iteration to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutReuse {
    /// Fresh contexts and sampling seeds every iteration.
    #[default]
    None,
    /// One draw of contexts, fresh sampling seeds.
    Contexts,
    /// Contexts and per-episode sampling seeds both fixed, so an unchanged
    /// policy reproduces its rollouts exactly.
    Scenarios,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 0.0,
            gamma: 0.9,
            lambda: 0.95 / 0.9,
            supervised_weight: 1.0,
            iterations: 30,
            rollouts: 128,
            max_len: 50,
            policy_lr: 1e-4,
            weight_decay: 0.0,
            grad_clip: 1.0,
            supervised_batch: 64,
            value_lr: 3e-3,
            value_epochs: 5,
            value_batch: 128,
            reuse: RolloutReuse::None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let finite_nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !finite_nonneg(self.alpha)
            || !finite_nonneg(self.beta)
            || !finite_nonneg(self.supervised_weight)
        {
            return bad(
                "finetune.alpha, finetune.beta and finetune.supervised_weight must be non-negative",
            );
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("finetune.gamma must be in (0, 1)");
        }
        if !finite_nonneg(self.lambda) || self.gamma * self.lambda > 1.0 + 1e-12 {
            return bad("finetune.lambda must be non-negative with gamma * lambda <= 1");
        }
        if self.rollouts == 0
            || self.max_len == 0
            || self.supervised_batch == 0
            || self.value_batch == 0
        {
            return bad(
                "finetune.rollouts, max_len, supervised_batch and value_batch must be positive",
            );
        }
        if !finite_nonneg(self.policy_lr)
            || !finite_nonneg(self.value_lr)
            || !finite_nonneg(self.weight_decay)
        {
            return bad("finetune learning rates and weight decay must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("finetune.grad_clip must be positive");
        }
        Ok(())
    }
}

/// Generalised advantage estimation. `values` holds `V(s_0..s_T)`; the caller
/// sets `V(s_T) = 0` for episodes that ended at the destination.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::shape(
            "compute_gae",
            &[rewards.len()],
            &[values.len()],
        ));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        next = delta + gamma * lambda * next;
        adv[t] = next;
    }
    Ok(adv)
}

/// Zero mean, unit (population) standard deviation. A constant batch maps to zeros.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len();
    if n == 0 || adv.iter().all(|&a| a == adv[0]) {
        return vec![0.0; n];
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    adv.iter().map(|a| (a - mean) / (std + ADV_EPS)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    pub d: usize,
    pub init_std: f64,
    /// Start the state embedding tables from the critic's.
    pub share_critic_embeddings: bool,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            d: 32,
            init_std: 0.1,
            share_critic_embeddings: false,
        }
    }
}

/// `V(s) = LeakyReLU([e_o, e_d, e_link, e_dep, e_user] W_s + b_s) w_v + b_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub cfg: ValueConfig,
    pub vocab: VocabSpec,
    pub params: ParamStore,
}

impl ValueModel {
    pub fn new(
        cfg: ValueConfig,
        vocab: VocabSpec,
        seed: u64,
        critic: Option<&CriticModel>,
    ) -> Result<Self> {
        if cfg.d == 0 || !(cfg.init_std >= 0.0) {
            return Err(Error::Config(
                "value.d must be positive and value.init_std non-negative".into(),
            ));
        }
        let d = cfg.d;
        let mut rng = rng_for(seed, 0);
        let mut p = ParamStore::new();
        let tables = [
            ("e_link", vocab.positions),
            ("e_origin", vocab.positions),
            ("e_destination", vocab.positions),
            ("e_depart", vocab.depart_bins),
            ("e_user", vocab.users),
        ];
        for (i, (name, rows)) in tables.into_iter().enumerate() {
            let t = match critic {
                Some(c) if cfg.share_critic_embeddings => {
                    if c.cfg.d != d || c.vocab != vocab {
                        return Err(Error::Config(
                            "shared embeddings need the critic's d and vocabulary".into(),
                        ));
                    }
                    c.params.get(CriticModel::embedding_ids()[i]).clone()
                }
                _ => randn(&[rows, d], cfg.init_std, &mut rng),
            };
            p.push(name, t);
        }
        p.push(
            "w_s",
            randn(&[5 * d, d], (1.0 / (5 * d) as f64).sqrt(), &mut rng),
        );
        p.push("b_s", Tensor::zeros(&[d]));
        p.push("w_v", randn(&[d, 1], (1.0 / d as f64).sqrt(), &mut rng));
        p.push("b_v", Tensor::zeros(&[1]));
        Ok(Self {
            cfg,
            vocab,
            params: p,
        })
    }

    pub fn zero(&mut self) {
        self.params
            .tensors_mut()
            .iter_mut()
            .for_each(|t| t.scale_inplace(0.0));
    }

    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        let cfg = serde_json::json!({ "value": self.cfg, "vocab": self.vocab });
        checkpoint::save(path, VALUE_CHECKPOINT_KIND, cfg, meta, &self.params)
    }

    pub fn load(path: &Path, expect_vocab: Option<&VocabSpec>) -> Result<(Self, Value)> {
        let (header, params) = checkpoint::load(path, VALUE_CHECKPOINT_KIND)?;
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let cfg: ValueConfig = serde_json::from_value(header.config["value"].clone())
            .map_err(|e| fail(format!("bad value config: {e}")))?;
        let vocab: VocabSpec = serde_json::from_value(header.config["vocab"].clone())
            .map_err(|e| fail(format!("bad vocab spec: {e}")))?;
        if let Some(v) = expect_vocab {
            if *v != vocab {
                return Err(fail(format!(
                    "vocabulary mismatch: checkpoint {vocab:?}, expected {v:?}"
                )));
            }
        }
        let mut m = Self::new(cfg, vocab, 0, None)?;
        checkpoint::check_layout(path, &params, &m.params)?;
        m.params = params;
        Ok((m, header.meta))
    }

    /// Record `V` for a batch of states, shape `[n, 1]`.
    pub fn graph<'p>(&'p self, g: &mut Graph<'p>, states: &[EnvState]) -> Result<Var> {
        for s in states {
            self.vocab.check_state(s)?;
        }
        let p = &self.params;
        let cols: [fn(&EnvState) -> usize; 5] = [
            |s| s.position,
            |s| s.origin,
            |s| s.destination,
            |s| s.depart_bin,
            |s| s.user_id,
        ];
        let mut parts = Vec::with_capacity(5);
        for (i, f) in cols.iter().enumerate() {
            let idx: Vec<usize> = states.iter().map(f).collect();
            let t = g.param(p, i);
            parts.push(g.embedding(t, &idx)?);
        }
        let x = g.concat_cols(&parts)?;
        let ws = g.param(p, 5);
        let bs = g.param(p, 6);
        let h = g.matmul(x, ws)?;
        let h = g.add_row(h, bs)?;
        let h = g.leaky_relu(h, 0.01);
        let wv = g.param(p, 7);
        let bv = g.param(p, 8);
        let v = g.matmul(h, wv)?;
        g.add_row(v, bv)
    }

    pub fn values(&self, states: &[EnvState]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let v = self.graph(&mut g, states)?;
        Ok(g.value(v).data().to_vec())
    }
}

/// One rollout with its per-step reward, value, advantage and log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEpisode {
    pub trajectory: Trajectory,
    pub rewards: Vec<f64>,
    /// `V(s_t)` for each decision step.
    pub values: Vec<f64>,
    /// `V(s_T)` used to bootstrap; 0 unless the episode was cut by `max_len`.
    pub bootstrap: f64,
    pub advantages: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ScoredEpisode {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn states(&self) -> Vec<EnvState> {
        let ts = transitions(&self.trajectory);
        let mut s: Vec<EnvState> = ts.iter().map(|t| t.state).collect();
        s.extend(ts.last().map(|t| t.next));
        s
    }
}

/// Rollout contexts drawn uniformly from the train split's trajectory contexts.
pub fn sample_contexts(
    dataset: &Dataset,
    n: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<GenerationContext>> {
    let pool: Vec<&Trajectory> = dataset.train().collect();
    if pool.is_empty() {
        return Err(Error::Argument("no expert contexts to sample from".into()));
    }
    contexts_from(&pool, n, max_len, 1.0, seed)
}

/// Masked log-probability of each taken action, each step scored once.
pub fn episode_log_probs(
    policy: &PolicyModel,
    ep: &EpisodeTokens,
    net: &Network,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ep.num_decisions());
    for (s, len, first) in scoring_windows(ep.len(), policy.cfg.context)? {
        let w = ep.window(s, len);
        let rows = rows_from(&w, net, first);
        if rows.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let (logits, _) = policy.build(&mut g, &w, &rows.steps, None)?;
        let logits = g.value(logits);
        for i in 0..rows.len() {
            let m = &rows.mask[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS];
            let row = logits.row(i);
            let feas: Vec<f64> = row
                .iter()
                .zip(m)
                .filter(|(_, &b)| b)
                .map(|(&v, _)| v)
                .collect();
            out.push(row[rows.targets[i]] - crate::numcore::logsumexp(&feas)?);
        }
    }
    Ok(out)
}

/// Generate at each context, score with the critic and value model, and compute GAE.
pub fn rollout_scored(
    policy: &PolicyModel,
    critic: &CriticModel,
    value: &ValueModel,
    net: &Network,
    contexts: &[GenerationContext],
    cfg: &FinetuneConfig,
) -> Result<Vec<ScoredEpisode>> {
    par::try_map(contexts, |ctx| -> Result<ScoredEpisode> {
        let trajectory = generate(ctx, policy, net)?;
        let rewards = trajectory_rewards(&trajectory, critic, net, cfg.gamma)?;
        let ep = encode_episode(&trajectory)?;
        let log_probs = episode_log_probs(policy, &ep, net)?;
        let mut scored = ScoredEpisode {
            trajectory,
            rewards,
            values: Vec::new(),
            bootstrap: 0.0,
            advantages: Vec::new(),
            log_probs,
        };
        let mut v = value.values(&scored.states())?;
        if scored.trajectory.status != Status::Truncated {
            *v.last_mut().unwrap() = 0.0;
        }
        scored.advantages = compute_gae(&scored.rewards, &v, cfg.gamma, cfg.lambda)?;
        scored.bootstrap = v.pop().unwrap();
        scored.values = v;
        Ok(scored)
    })
}

/// TD regression of `V(s_t)` toward `r_t + γ V_target(s_{t+1})`, with the
/// target network frozen for the whole call. Returns the final mean squared TD error.
pub fn value_update(
    episodes: &[ScoredEpisode],
    value: &mut ValueModel,
    opt: &mut AdamW,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<f64> {
    let mut states = Vec::new();
    let mut targets = Vec::new();
    for e in episodes {
        let s = e.states();
        let v = value.values(&s)?;
        let n = e.rewards.len();
        for t in 0..n {
            let end = t + 1 == n && e.trajectory.status != Status::Truncated;
            let next = if end { 0.0 } else { v[t + 1] };
            states.push(s[t]);
            targets.push(e.rewards[t] + cfg.gamma * next);
        }
    }
    if states.is_empty() {
        return Err(Error::Argument(
            "no transitions for the value update".into(),
        ));
    }
    let mse = |value: &ValueModel, idx: &[usize]| -> Result<(f64, Vec<Tensor>)> {
        let s: Vec<EnvState> = idx.iter().map(|&i| states[i]).collect();
        let y = Tensor::new(
            vec![idx.len(), 1],
            idx.iter().map(|&i| targets[i]).collect(),
        )?;
        let mut g = Graph::new();
        let v = value.graph(&mut g, &s)?;
        let y = g.constant(y);
        let diff = g.sub(v, y)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let grads = g.backward(loss, &value.params)?;
        Ok((g.scalar(loss), grads))
    };
    let mut order: Vec<usize> = (0..states.len()).collect();
    for epoch in 0..cfg.value_epochs {
        order.shuffle(&mut rng_for(seed, epoch as u64));
        for batch in order.chunks(cfg.value_batch) {
            let (loss, grads) = mse(value, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite value loss {loss}")));
            }
            opt.step(&mut value.params, &grads)?;
        }
    }
    let all: Vec<usize> = (0..states.len()).collect();
    Ok(mse(value, &all)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub supervised: f64,
    /// `−α·mean(Â log π)` over rollout steps.
    pub policy_gradient: f64,
    /// Mean `KL(π ‖ π_ref)` over rollout steps.
    pub kl: f64,
    pub total: f64,
}

/// Rollout-side terms: `Σ_i w_i (−log π)` with `w = αÂ/N` plus `β` times the mean
/// KL to the reference, accumulated over episodes in fixed chunks.
fn rollout_terms(
    policy: &PolicyModel,
    reference: &PolicyModel,
    episodes: &[EpisodeTokens],
    adv: &[Vec<f64>],
    net: &Network,
    cfg: &FinetuneConfig,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let n: usize = adv.iter().map(|a| a.len()).sum();
    if n == 0 {
        return Err(Error::Argument("rollouts have no decision step".into()));
    }
    let inv = 1.0 / n as f64;
    let chunks: Vec<usize> = (0..episodes.len().div_ceil(CHUNK)).collect();
    let parts = par::try_map(&chunks, |&c| -> Result<(f64, f64, Vec<Tensor>)> {
        let mut grads = policy.params.zeros_like();
        let (mut pg, mut kl) = (0.0, 0.0);
        for e in c * CHUNK..((c + 1) * CHUNK).min(episodes.len()) {
            let ep = &episodes[e];
            let mut t = 0;
            for (s, len, first) in scoring_windows(ep.len(), policy.cfg.context)? {
                let w = ep.window(s, len);
                let rows = rows_from(&w, net, first);
                if rows.is_empty() {
                    continue;
                }
                let a = &adv[e][t..t + rows.len()];
                t += rows.len();
                let mut rg = Graph::new();
                let (rl, _) = reference.build(&mut rg, &w, &rows.steps, None)?;
                let ref_logp = masked_log_softmax(rg.value(rl), &rows.mask);
                let mut g = Graph::new();
                let (logits, _) = policy.build(&mut g, &w, &rows.steps, None)?;
                let weights: Vec<f64> = a.iter().map(|x| cfg.alpha * x * inv).collect();
                let pg_v = g.cross_entropy(logits, &rows.targets, &weights, Some(&rows.mask))?;
                let kl_v =
                    g.kl_to_reference(logits, ref_logp, &vec![inv; rows.len()], Some(&rows.mask))?;
                pg += g.scalar(pg_v);
                kl += g.scalar(kl_v);
                let kl_s = g.scale(kl_v, cfg.beta);
                let total = g.add(pg_v, kl_s)?;
                g.backward_into(total, &mut grads)?;
            }
        }
        Ok((pg, kl, grads))
    })?;
    let mut iter = parts.into_iter();
    let (mut pg, mut kl, mut grads) = iter.next().unwrap();
    for (p, k, g) in iter {
        pg += p;
        kl += k;
        accumulate(&mut grads, &g);
    }
    Ok((pg, kl, grads))
}

fn masked_log_softmax(logits: &Tensor, mask: &[bool]) -> Tensor {
    let (rows, cols) = logits.rows_cols();
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let m = &mask[r * cols..(r + 1) * cols];
        let row = logits.row(r);
        let feas: Vec<f64> = row
            .iter()
            .zip(m)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| v)
            .collect();
        let lse = crate::numcore::logsumexp(&feas).unwrap_or(0.0);
        for c in 0..cols {
            out.row_mut(r)[c] = if m[c] { row[c] - lse } else { 0.0 };
        }
    }
    out
}

/// Mean `KL(π ‖ π_ref)` over the rollout steps, without gradients.
pub fn mean_kl(
    policy: &PolicyModel,
    reference: &PolicyModel,
    episodes: &[EpisodeTokens],
    net: &Network,
) -> Result<f64> {
    let zero: Vec<Vec<f64>> = episodes
        .iter()
        .map(|e| vec![0.0; e.num_decisions()])
        .collect();
    let cfg = FinetuneConfig {
        alpha: 0.0,
        beta: 0.0,
        ..FinetuneConfig::default()
    };
    Ok(rollout_terms(policy, reference, episodes, &zero, net, &cfg)?.1)
}

/// One optimizer step on the fine-tuning objective. With `α = β = 0` and unit
/// supervised weight this is exactly [`crate::pretrain::train_step`].
#[allow(clippy::too_many_arguments)]
pub fn rmft_step(
    policy: &mut PolicyModel,
    opt: &mut AdamW,
    episodes: &[ScoredEpisode],
    supervised: &[ContextWindow],
    net: &Network,
    cfg: &FinetuneConfig,
    reference: &PolicyModel,
    step_seed: u64,
) -> Result<StepDiagnostics> {
    let mut diag = StepDiagnostics::default();
    let mut grads = if cfg.supervised_weight > 0.0 {
        let (loss, mut g) = batch_grads(policy, supervised, net, step_seed, true)?;
        if cfg.supervised_weight != 1.0 {
            g.iter_mut()
                .for_each(|t| t.scale_inplace(cfg.supervised_weight));
        }
        diag.supervised = loss;
        g
    } else {
        policy.params.zeros_like()
    };
    let rl_active = cfg.alpha > 0.0 || cfg.beta > 0.0;
    if rl_active {
        let eps: Vec<EpisodeTokens> = episodes
            .iter()
            .map(|e| encode_episode(&e.trajectory))
            .collect::<Result<_>>()?;
        let flat: Vec<f64> = episodes
            .iter()
            .flat_map(|e| e.advantages.iter().copied())
            .collect();
        let norm = normalize_advantages(&flat);
        let mut adv = Vec::with_capacity(episodes.len());
        let mut at = 0;
        for e in episodes {
            adv.push(norm[at..at + e.advantages.len()].to_vec());
            at += e.advantages.len();
        }
        let (pg, kl, g) = rollout_terms(policy, reference, &eps, &adv, net, cfg)?;
        accumulate(&mut grads, &g);
        diag.policy_gradient = pg;
        diag.kl = kl;
    } else if !episodes.is_empty() {
        let eps: Vec<EpisodeTokens> = episodes
            .iter()
            .map(|e| encode_episode(&e.trajectory))
            .collect::<Result<_>>()?;
        diag.kl = mean_kl(policy, reference, &eps, net)?;
    }
    diag.total =
        cfg.supervised_weight * diag.supervised + diag.policy_gradient + cfg.beta * diag.kl;
    if !diag.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite fine-tuning loss {}",
            diag.total
        )));
    }
    clip_global_norm(&mut grads, cfg.grad_clip);
    opt.step(&mut policy.params, &grads)?;
    if !policy.params.all_finite() {
        return Err(Error::Divergence(
            "non-finite parameters after update".into(),
        ));
    }
    Ok(diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub nll: f64,
    pub kl: f64,
    pub arrival_rate: f64,
    pub value_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub records: Vec<IterationRecord>,
}

impl FinetuneLog {
    /// `iter,mean_reward,nll,kl,arrival_rate,seconds`; without `seconds` the output is reproducible.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut s = String::from("iter,mean_reward,nll,kl,arrival_rate");
        s.push_str(if with_seconds { ",seconds\n" } else { "\n" });
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}",
                r.iter, r.mean_reward, r.nll, r.kl, r.arrival_rate
            ));
            if with_seconds {
                s.push_str(&format!(",{:.3}", r.seconds));
            }
            s.push('\n');
        }
        s
    }

    pub fn mean_reward(&self, range: std::ops::Range<usize>) -> f64 {
        let r = &self.records[range];
        r.iter().map(|x| x.mean_reward).sum::<f64>() / r.len() as f64
    }
}

/// Iterate rollout → value update → policy update. The reference policy is
/// the input policy, frozen.
pub fn finetune(
    policy: &mut PolicyModel,
    critic: &CriticModel,
    value: &mut ValueModel,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneLog> {
    cfg.validate()?;
    let net = &dataset.network;
    let reference = policy.clone();
    let train_eps = encode_all(dataset.train())?;
    let eval_eps = encode_all(dataset.eval())?;
    let k = policy.cfg.context;
    let windows = training_windows(&train_eps, k, (k / 2).max(1))?;
    if windows.is_empty() {
        return Err(Error::Argument(
            "no expert windows for the supervised term".into(),
        ));
    }
    let mut opt = AdamW::new(&policy.params, cfg.policy_lr, cfg.weight_decay);
    let mut vopt = AdamW::new(&value.params, cfg.value_lr, 0.0);
    let mut log = FinetuneLog::default();
    let fixed = sample_contexts(dataset, cfg.rollouts, cfg.max_len, derive_seed(seed, 0))?;
    for iter in 1..=cfg.iterations {
        let started = Instant::now();
        let it_seed = derive_seed(seed, iter as u64);
        let contexts = match cfg.reuse {
            RolloutReuse::None => {
                sample_contexts(dataset, cfg.rollouts, cfg.max_len, derive_seed(it_seed, 0))?
            }
            RolloutReuse::Contexts => fixed
                .iter()
                .enumerate()
                .map(|(i, c)| GenerationContext {
                    seed: derive_seed(it_seed, i as u64 + 4),
                    ..c.clone()
                })
                .collect(),
            RolloutReuse::Scenarios => fixed.clone(),
        };
        let episodes = rollout_scored(policy, critic, value, net, &contexts, cfg)?;
        let value_loss = value_update(&episodes, value, &mut vopt, cfg, derive_seed(it_seed, 1))?;
        let mut rng = rng_for(it_seed, 2);
        let batch: Vec<ContextWindow> = windows
            .choose_multiple(&mut rng, cfg.supervised_batch.min(windows.len()))
            .map(|&(e, s, l)| train_eps[e].window(s, l))
            .collect();
        let diag = rmft_step(
            policy,
            &mut opt,
            &episodes,
            &batch,
            net,
            cfg,
            &reference,
            derive_seed(it_seed, 3),
        )?;
        let nll = if eval_eps.is_empty() {
            f64::NAN
        } else {
            eval_policy(&eval_eps, policy, net)?.0
        };
        let rec = IterationRecord {
            iter,
            mean_reward: episodes.iter().map(|e| e.total_reward()).sum::<f64>()
                / episodes.len() as f64,
            nll,
            kl: diag.kl,
            arrival_rate: episodes
                .iter()
                .filter(|e| e.trajectory.is_complete())
                .count() as f64
                / episodes.len() as f64,
            value_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "rmft iter {iter}: reward {:.4} nll {:.4} kl {:.5} arrival {:.3}",
            rec.mean_reward,
            rec.nll,
            rec.kl,
            rec.arrival_rate
        );
        log.records.push(rec);
    }
    Ok(log)
}
