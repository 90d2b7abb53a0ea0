//! Behavioural cloning of actions with the masked cross-entropy objective.
//!
//! Gradients of a batch are computed per window, summed inside fixed chunks
//! of [`CHUNK`] windows and then across chunks in order, so the result does
//! not depend on the thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgrid::{EnvState, Network, NUM_ACTIONS};
use crate::numcore::{accumulate, clip_global_norm, derive_seed, rng_for, AdamW, Graph, Tensor};
use crate::par;
use crate::synthgen::{oracle_action_probs, Dataset, PreferenceParams, Trajectory};
use crate::tokenizer::{encode_episode, window_starts, ContextWindow, EpisodeTokens};
use crate::trajmodel::{DecisionRows, PolicyModel};

pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Epochs without eval improvement before stopping; 0 disables.
    pub patience: usize,
    /// Window stride in steps; 0 means half the context.
    pub stride: usize,
    /// The learning rate is multiplied by this after every evaluation that does
    /// not improve on the best; 1 keeps it constant.
    pub plateau_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 5e-4,
            weight_decay: 0.02,
            grad_clip: 1.0,
            eval_every: 1,
            patience: 5,
            stride: 0,
            plateau_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("pretrain.batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("pretrain.lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("pretrain.weight_decay must be finite and non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("pretrain.grad_clip must be positive");
        }
        if self.eval_every == 0 {
            return bad("pretrain.eval_every must be positive");
        }
        if !(self.plateau_decay > 0.0 && self.plateau_decay <= 1.0) {
            return bad("pretrain.plateau_decay must be in (0, 1]");
        }
        Ok(())
    }

    pub fn stride_for(&self, context: usize) -> usize {
        if self.stride == 0 {
            (context / 2).max(1)
        } else {
            self.stride
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub eval_nll: f64,
    pub eval_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// `epoch,train_nll,eval_nll,eval_acc,seconds`; without `seconds` the output is reproducible.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut s = String::from("epoch,train_nll,eval_nll,eval_acc");
        s.push_str(if with_seconds { ",seconds\n" } else { "\n" });
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{}",
                r.epoch, r.train_nll, r.eval_nll, r.eval_acc
            ));
            if with_seconds {
                s.push_str(&format!(",{:.3}", r.seconds));
            }
            s.push('\n');
        }
        s
    }
}

/// Encode every trajectory.
pub fn encode_all<'a>(trajs: impl Iterator<Item = &'a Trajectory>) -> Result<Vec<EpisodeTokens>> {
    trajs.map(encode_episode).collect()
}

/// Training windows `(episode, start, len)` that contain at least one decision.
pub fn training_windows(
    episodes: &[EpisodeTokens],
    k: usize,
    stride: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let len = k.min(ep.len());
        for s in window_starts(ep.len(), k, stride)? {
            if ep.window(s, len).num_decisions() > 0 {
                out.push((e, s, len));
            }
        }
    }
    Ok(out)
}

/// Mean masked NLL of a batch and its gradient. Dropout is driven by
/// `rng_for(step_seed, i)` for window `i` when `train` is set.
pub fn batch_grads(
    model: &PolicyModel,
    windows: &[ContextWindow],
    net: &Network,
    step_seed: u64,
    train: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let total: usize = windows.iter().map(|w| w.num_decisions()).sum();
    if total == 0 {
        return Err(Error::Argument("batch has no decision step".into()));
    }
    let weight = 1.0 / total as f64;
    let chunks: Vec<usize> = (0..windows.len().div_ceil(CHUNK)).collect();
    let parts = par::try_map(&chunks, |&c| -> Result<(f64, Vec<Tensor>)> {
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for i in c * CHUNK..((c + 1) * CHUNK).min(windows.len()) {
            let mut rng = rng_for(step_seed, i as u64);
            let mut g = Graph::new();
            if let Some(l) =
                model.nll_graph(&mut g, &windows[i], net, weight, train.then_some(&mut rng))?
            {
                loss += g.scalar(l);
                g.backward_into(l, &mut grads)?;
            }
        }
        Ok((loss, grads))
    })?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap();
    for (l, g) in iter {
        loss += l;
        accumulate(&mut grads, &g);
    }
    Ok((loss, grads))
}

/// One clipped AdamW step on `windows`. Returns the batch loss before the update.
pub fn train_step(
    model: &mut PolicyModel,
    opt: &mut AdamW,
    windows: &[ContextWindow],
    net: &Network,
    grad_clip: f64,
    step_seed: u64,
) -> Result<f64> {
    let (loss, mut grads) = batch_grads(model, windows, net, step_seed, true)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite training loss {loss}"
        )));
    }
    clip_global_norm(&mut grads, grad_clip);
    opt.step(&mut model.params, &grads)?;
    if !model.params.all_finite() {
        return Err(Error::Divergence(
            "non-finite parameters after update".into(),
        ));
    }
    Ok(loss)
}

/// Lowest-index argmax over feasible entries.
pub fn masked_argmax(logits: &[f64], mask: &[bool]) -> usize {
    (0..logits.len())
        .filter(|&k| mask[k])
        .fold(None, |b: Option<usize>, k| match b {
            Some(b) if logits[b] >= logits[k] => Some(b),
            _ => Some(k),
        })
        .unwrap_or(0)
}

/// Windows `(start, len, first)` that score every decision of an episode of
/// `ep_len` steps exactly once: stride K/2, and each step is scored in the
/// first window containing it, i.e. at window offsets `>= first`.
pub fn scoring_windows(ep_len: usize, k: usize) -> Result<Vec<(usize, usize, usize)>> {
    let len = k.min(ep_len);
    let mut out = Vec::new();
    let mut scored_until = 0usize;
    for s in window_starts(ep_len, k, (k / 2).max(1))? {
        out.push((s, len, scored_until.saturating_sub(s)));
        scored_until = s + len;
    }
    Ok(out)
}

/// Decision rows of `w` at window offsets `>= first`.
pub fn rows_from(w: &ContextWindow, net: &Network, first: usize) -> DecisionRows {
    let all = DecisionRows::of(w, net);
    let mut out = DecisionRows {
        steps: Vec::new(),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    for i in (0..all.len()).filter(|&i| all.steps[i] >= first) {
        out.steps.push(all.steps[i]);
        out.targets.push(all.targets[i]);
        out.mask
            .extend_from_slice(&all.mask[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS]);
    }
    out
}

/// Teacher-forced log-probabilities of every action at every decision step of
/// `ep`, softmax restricted to feasible actions; infeasible entries are `-inf`.
/// Episodes longer than K are cut by [`scoring_windows`].
pub fn step_log_probs(
    ep: &EpisodeTokens,
    model: &PolicyModel,
    net: &Network,
) -> Result<Vec<[f64; NUM_ACTIONS]>> {
    let mut out = Vec::with_capacity(ep.len());
    for (s, len, first) in scoring_windows(ep.len(), model.cfg.context)? {
        let w = ep.window(s, len);
        let rows = rows_from(&w, net, first);
        if rows.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let (logits, _) = model.build(&mut g, &w, &rows.steps, None)?;
        let logits = g.value(logits);
        for i in 0..rows.len() {
            let mask = &rows.mask[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS];
            let row = logits.row(i);
            let lse = crate::numcore::logsumexp(
                &row.iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .collect::<Vec<_>>(),
            )?;
            let mut lp = [f64::NEG_INFINITY; NUM_ACTIONS];
            for k in (0..NUM_ACTIONS).filter(|&k| mask[k]) {
                lp[k] = row[k] - lse;
            }
            out.push(lp);
        }
    }
    Ok(out)
}

/// Teacher-forced mean NLL and top-1 accuracy over every decision step.
pub fn eval_policy(
    episodes: &[EpisodeTokens],
    model: &PolicyModel,
    net: &Network,
) -> Result<(f64, f64)> {
    let per_episode = par::try_map(episodes, |ep| -> Result<(f64, usize, usize)> {
        let lps = step_log_probs(ep, model, net)?;
        let mut nll = 0.0;
        let mut correct = 0;
        for (lp, step) in lps.iter().zip(&ep.steps) {
            let target = step.action.expect("decision step").index();
            nll -= lp[target];
            correct += (masked_argmax(lp, &lp.map(f64::is_finite)) == target) as usize;
        }
        Ok((nll, correct, lps.len()))
    })?;
    let (mut nll, mut correct, mut n) = (0.0, 0, 0);
    for (a, b, c) in per_episode {
        nll += a;
        correct += b;
        n += c;
    }
    if n == 0 {
        return Err(Error::Argument("no decision steps to evaluate".into()));
    }
    Ok((nll / n as f64, correct as f64 / n as f64))
}

/// Held-out fit of a policy against the generating oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleFidelity {
    /// Mean `-log π(a_t)` of the recorded actions.
    pub nll: f64,
    /// Mean `E_{a~π*}[-log π(a)]` over the recorded states.
    pub expected_nll: f64,
    /// Mean exact entropy of the oracle over the same states.
    pub entropy: f64,
    pub accuracy: f64,
    /// Mean `max_a π*(a)`: the best expected top-1 accuracy.
    pub ceiling: f64,
    pub steps: usize,
}

impl OracleFidelity {
    /// `expected_nll - entropy`, the mean KL(π* ‖ π); never negative.
    pub fn excess(&self) -> f64 {
        self.expected_nll - self.entropy
    }
}

/// Compare `model` with the oracle that generated `trajectories` under `params`.
pub fn oracle_fidelity<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    model: &PolicyModel,
    net: &Network,
    params: &PreferenceParams,
) -> Result<OracleFidelity> {
    let trajs: Vec<&Trajectory> = trajectories.into_iter().collect();
    let per = par::try_map(&trajs, |t| -> Result<[f64; 5]> {
        let ep = encode_episode(t)?;
        let lps = step_log_probs(&ep, model, net)?;
        if lps.len() != t.actions.len() {
            return Err(Error::Trajectory {
                id: t.traj_id,
                reason: format!("scored {} of {} steps", lps.len(), t.actions.len()),
            });
        }
        let theta = params.user(t.user_id)?;
        let ctx = EnvState {
            position: t.origin(),
            origin: t.origin(),
            destination: t.destination,
            depart_bin: t.depart_bin,
            speed_bin: t.speed_bin,
            user_id: t.user_id,
        };
        let mut acc = [0.0; 5];
        for (i, lp) in lps.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| t.actions[j]);
            let p = oracle_action_probs(net, &ctx.at(t.positions[i]), prev, theta)?;
            let target = t.actions[i].index();
            acc[0] -= lp[target];
            for k in (0..NUM_ACTIONS).filter(|&k| p[k] > 0.0) {
                acc[1] -= p[k] * lp[k];
                acc[2] -= p[k] * p[k].ln();
            }
            acc[3] += (masked_argmax(lp, &lp.map(f64::is_finite)) == target) as u8 as f64;
            acc[4] += p.iter().copied().fold(0.0, f64::max);
        }
        Ok(acc)
    })?;
    let n: usize = trajs.iter().map(|t| t.actions.len()).sum();
    if n == 0 {
        return Err(Error::Argument("no decision steps to evaluate".into()));
    }
    let mut tot = [0.0; 5];
    for a in &per {
        for (t, x) in tot.iter_mut().zip(a) {
            *t += x;
        }
    }
    let m = n as f64;
    Ok(OracleFidelity {
        nll: tot[0] / m,
        expected_nll: tot[1] / m,
        entropy: tot[2] / m,
        accuracy: tot[3] / m,
        ceiling: tot[4] / m,
        steps: n,
    })
}

/// Train on the dataset's train split, evaluating on its eval split.
/// Epochs are numbered from `first_epoch + 1`; the best-eval parameters are kept.
pub fn pretrain(
    dataset: &Dataset,
    model: &mut PolicyModel,
    cfg: &TrainConfig,
    seed: u64,
    first_epoch: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.split.train.is_empty() {
        return Err(Error::Argument("empty training split".into()));
    }
    if dataset.users > model.vocab.users || dataset.network.num_positions() > model.vocab.positions
    {
        return Err(Error::Config(
            "dataset does not fit the model vocabulary".into(),
        ));
    }
    let net = &dataset.network;
    let train_eps = encode_all(dataset.train())?;
    let eval_eps = encode_all(dataset.eval())?;
    let windows = training_windows(
        &train_eps,
        model.cfg.context,
        cfg.stride_for(model.cfg.context),
    )?;
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, crate::numcore::ParamStore)> = None;
    let mut stale = 0;
    for epoch in first_epoch + 1..=first_epoch + cfg.epochs {
        let started = Instant::now();
        let epoch_seed = derive_seed(seed, epoch as u64);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng_for(epoch_seed, 0));
        let (mut loss_sum, mut weight_sum) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let ws: Vec<ContextWindow> = batch
                .iter()
                .map(|&i| {
                    let (e, s, l) = windows[i];
                    train_eps[e].window(s, l)
                })
                .collect();
            let n: usize = ws.iter().map(|w| w.num_decisions()).sum();
            let loss = train_step(
                model,
                &mut opt,
                &ws,
                net,
                cfg.grad_clip,
                derive_seed(epoch_seed, b as u64 + 1),
            )?;
            loss_sum += loss * n as f64;
            weight_sum += n;
        }
        let last = epoch == first_epoch + cfg.epochs;
        let (eval_nll, eval_acc) =
            if !eval_eps.is_empty() && ((epoch - first_epoch) % cfg.eval_every == 0 || last) {
                eval_policy(&eval_eps, model, net)?
            } else {
                (f64::NAN, f64::NAN)
            };
        let rec = EpochRecord {
            epoch,
            train_nll: loss_sum / weight_sum.max(1) as f64,
            eval_nll,
            eval_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} eval {:.4} acc {:.4}",
            rec.train_nll,
            rec.eval_nll,
            rec.eval_acc
        );
        log.records.push(rec);
        if eval_nll.is_finite() {
            if best.as_ref().is_none_or(|(b, _)| eval_nll < *b) {
                best = Some((eval_nll, model.params.clone()));
                log.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                opt.lr *= cfg.plateau_decay;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(log)
}
