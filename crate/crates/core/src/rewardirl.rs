//! IQ-Learn critic with a population term (BVE) and a user term (PVE).
//!
//! `Q(s,·) = LeakyReLU([e_o, e_d, e_link, e_dep] W_s) W_bve + (e_o + e_d + e_dep + e_user) W_pve`.
//! The training objective is `−J(Q)` with `φ(x) = x − x²/(4α_φ)`; V* is the
//! logsumexp of Q over feasible actions and is 0 at terminal states.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::netgrid::{ActionId, EnvState, Network, NUM_ACTIONS};
use crate::numcore::{
    accumulate, clip_global_norm, derive_seed, logsumexp, masked_softmax, randn, rng_for, AdamW,
    Graph, ParamStore, Tensor, Var,
};
use crate::par;
use crate::synthgen::{Dataset, Trajectory};
use crate::tokenizer::VocabSpec;

pub const CHECKPOINT_KIND: &str = "critic";
const ROWS_PER_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub d: usize,
    pub leaky_slope: f64,
    pub init_std: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            d: 64,
            leaky_slope: 0.01,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlConfig {
    pub gamma: f64,
    pub alpha_phi: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha_phi: 0.5,
            lr: 3e-3,
            weight_decay: 0.0,
            grad_clip: 10.0,
            batch_size: 256,
            epochs: 300,
        }
    }
}

impl IrlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("irl.gamma must be in (0, 1)");
        }
        if !(self.alpha_phi > 0.0 && self.alpha_phi.is_finite()) {
            return bad("irl.alpha_phi must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("irl.lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("irl.weight_decay must be non-negative and irl.grad_clip positive");
        }
        if self.batch_size == 0 {
            return bad("irl.batch_size must be positive");
        }
        Ok(())
    }
}

/// One expert transition. `next` is the observed successor state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: EnvState,
    pub action: ActionId,
    pub next: EnvState,
    pub is_initial: bool,
    pub is_terminal: bool,
}

pub fn transitions(traj: &Trajectory) -> Vec<Transition> {
    let ctx = EnvState {
        position: traj.origin(),
        origin: traj.origin(),
        destination: traj.destination,
        depart_bin: traj.depart_bin,
        speed_bin: traj.speed_bin,
        user_id: traj.user_id,
    };
    let k = traj.actions.len();
    (0..k)
        .map(|t| Transition {
            state: ctx.at(traj.positions[t]),
            action: traj.actions[t],
            next: ctx.at(traj.positions[t + 1]),
            is_initial: t == 0,
            is_terminal: t + 1 == k && traj.is_complete(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    pub cfg: CriticConfig,
    pub vocab: VocabSpec,
    pub params: ParamStore,
}

// Parameter order.
const E_LINK: usize = 0;
const E_O: usize = 1;
const E_D: usize = 2;
const E_DEP: usize = 3;
const E_USER: usize = 4;
const W_S: usize = 5;
const W_BVE: usize = 6;
const W_PVE: usize = 7;

impl CriticModel {
    pub fn new(cfg: CriticConfig, vocab: VocabSpec, seed: u64) -> Result<Self> {
        if cfg.d == 0 || !(cfg.init_std >= 0.0) {
            return Err(Error::Config(
                "critic.d must be positive and critic.init_std non-negative".into(),
            ));
        }
        let mut rng = rng_for(seed, 0);
        let d = cfg.d;
        let std = cfg.init_std;
        let mut p = ParamStore::new();
        p.push("e_link", randn(&[vocab.positions, d], std, &mut rng));
        p.push("e_origin", randn(&[vocab.positions, d], std, &mut rng));
        p.push("e_destination", randn(&[vocab.positions, d], std, &mut rng));
        p.push("e_depart", randn(&[vocab.depart_bins, d], std, &mut rng));
        p.push("e_user", randn(&[vocab.users, d], std, &mut rng));
        p.push(
            "w_s",
            randn(&[4 * d, d], (1.0 / (4 * d) as f64).sqrt(), &mut rng),
        );
        p.push(
            "w_bve",
            randn(&[d, NUM_ACTIONS], (1.0 / d as f64).sqrt(), &mut rng),
        );
        p.push(
            "w_pve",
            randn(&[d, NUM_ACTIONS], (1.0 / d as f64).sqrt(), &mut rng),
        );
        Ok(Self {
            cfg,
            vocab,
            params: p,
        })
    }

    pub fn zeroed(cfg: CriticConfig, vocab: VocabSpec) -> Result<Self> {
        let mut m = Self::new(cfg, vocab, 0)?;
        m.params
            .tensors_mut()
            .iter_mut()
            .for_each(|t| t.scale_inplace(0.0));
        Ok(m)
    }

    pub fn zero_pve(&mut self) {
        self.params.get_mut(W_PVE).scale_inplace(0.0);
    }

    pub fn embedding_ids() -> [usize; 5] {
        [E_LINK, E_O, E_D, E_DEP, E_USER]
    }

    /// Record `Q(s,·)` for a batch of states, shape `[n, 9]`.
    pub fn q_graph<'p>(&'p self, g: &mut Graph<'p>, states: &[EnvState]) -> Result<Var> {
        for s in states {
            self.vocab.check_state(s)?;
        }
        let p = &self.params;
        let col = |f: fn(&EnvState) -> usize| states.iter().map(f).collect::<Vec<_>>();
        let lookup = |g: &mut Graph<'p>, id: usize, idx: &[usize]| -> Result<Var> {
            let t = g.param(p, id);
            g.embedding(t, idx)
        };
        let link = lookup(g, E_LINK, &col(|s| s.position))?;
        let o = lookup(g, E_O, &col(|s| s.origin))?;
        let d = lookup(g, E_D, &col(|s| s.destination))?;
        let dep = lookup(g, E_DEP, &col(|s| s.depart_bin))?;
        let user = lookup(g, E_USER, &col(|s| s.user_id))?;
        let x = g.concat_cols(&[o, d, link, dep])?;
        let ws = g.param(p, W_S);
        let h = g.matmul(x, ws)?;
        let h = g.leaky_relu(h, self.cfg.leaky_slope);
        let wb = g.param(p, W_BVE);
        let bve = g.matmul(h, wb)?;
        let pref = g.add(o, d)?;
        let pref = g.add(pref, dep)?;
        let pref = g.add(pref, user)?;
        let wp = g.param(p, W_PVE);
        let pve = g.matmul(pref, wp)?;
        g.add(bve, pve)
    }

    pub fn q_values(&self, s: &EnvState) -> Result<[f64; NUM_ACTIONS]> {
        let mut g = Graph::new();
        let q = self.q_graph(&mut g, std::slice::from_ref(s))?;
        Ok(g.value(q).data().try_into().unwrap())
    }

    /// Q for many states at once, one row per state.
    pub fn q_batch(&self, states: &[EnvState]) -> Result<Vec<[f64; NUM_ACTIONS]>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let q = self.q_graph(&mut g, states)?;
        Ok(g.value(q)
            .data()
            .chunks_exact(NUM_ACTIONS)
            .map(|c| c.try_into().unwrap())
            .collect())
    }

    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        let cfg = serde_json::json!({ "critic": self.cfg, "vocab": self.vocab });
        checkpoint::save(path, CHECKPOINT_KIND, cfg, meta, &self.params)
    }

    pub fn load(path: &Path, expect_vocab: Option<&VocabSpec>) -> Result<(Self, Value)> {
        let (header, params) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let cfg: CriticConfig = serde_json::from_value(header.config["critic"].clone())
            .map_err(|e| fail(format!("bad critic config: {e}")))?;
        let vocab: VocabSpec = serde_json::from_value(header.config["vocab"].clone())
            .map_err(|e| fail(format!("bad vocab spec: {e}")))?;
        if let Some(v) = expect_vocab {
            if *v != vocab {
                return Err(fail(format!(
                    "vocabulary mismatch: checkpoint {vocab:?}, expected {v:?}"
                )));
            }
        }
        let mut m = Self::new(cfg, vocab, 0)?;
        checkpoint::check_layout(path, &params, &m.params)?;
        m.params = params;
        Ok((m, header.meta))
    }
}

fn feasible_vals(q: &[f64; NUM_ACTIONS], mask: &[bool; NUM_ACTIONS]) -> Vec<f64> {
    q.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect()
}

/// `log Σ exp Q(s, a)` over feasible actions.
pub fn v_star(s: &EnvState, critic: &CriticModel, net: &Network) -> Result<f64> {
    let mask = net.feasible_mask(s.position);
    logsumexp(&feasible_vals(&critic.q_values(s)?, &mask))
        .map_err(|_| Error::DeadEnd(Some(s.position)))
}

/// `r = Q(s, a) − γ·V*(s′)`, with `V*(s′) = 0` at terminals.
pub fn recover_reward(
    t: &Transition,
    critic: &CriticModel,
    net: &Network,
    gamma: f64,
) -> Result<f64> {
    let q = critic.q_values(&t.state)?[t.action.index()];
    if t.is_terminal {
        return Ok(q);
    }
    Ok(q - gamma * v_star(&t.next, critic, net)?)
}

/// Per-step recovered rewards along a trajectory.
pub fn trajectory_rewards(
    traj: &Trajectory,
    critic: &CriticModel,
    net: &Network,
    gamma: f64,
) -> Result<Vec<f64>> {
    let ts = transitions(traj);
    let mut states: Vec<EnvState> = ts.iter().map(|t| t.state).collect();
    states.extend(ts.last().map(|t| t.next));
    let q = critic.q_batch(&states)?;
    ts.iter()
        .enumerate()
        .map(|(i, t)| {
            let v_next = if t.is_terminal {
                0.0
            } else {
                let mask = net.feasible_mask(t.next.position);
                logsumexp(&feasible_vals(&q[i + 1], &mask)).unwrap_or(0.0)
            };
            Ok(q[i][t.action.index()] - gamma * v_next)
        })
        .collect()
}

/// `softmax` of feasible-masked Q; infeasible actions get exactly 0.
pub fn critic_policy(
    s: &EnvState,
    critic: &CriticModel,
    net: &Network,
) -> Result<[f64; NUM_ACTIONS]> {
    let mask = net.feasible_mask(s.position);
    if !mask.iter().any(|&m| m) {
        return Err(Error::DeadEnd(Some(s.position)));
    }
    Ok(masked_softmax(&critic.q_values(s)?, &mask)
        .try_into()
        .unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IqLossParts {
    /// `−mean φ(Q(s,a) − γV*(s′))`.
    pub phi_term: f64,
    /// `(1−γ)·mean over initial states of V*(s0)`.
    pub initial_term: f64,
}

/// Record the part of `−J(Q)` contributed by `batch[range]`, normalised by the
/// whole batch's transition and initial-state counts.
fn iq_graph<'p>(
    g: &mut Graph<'p>,
    critic: &'p CriticModel,
    net: &Network,
    part: &[Transition],
    n_total: usize,
    n_initial: usize,
    cfg: &IrlConfig,
) -> Result<(Var, Var)> {
    let n = part.len();
    let states: Vec<EnvState> = part.iter().map(|t| t.state).collect();
    let nexts: Vec<EnvState> = part.iter().map(|t| t.next).collect();
    let q = critic.q_graph(g, &states)?;
    let qn = critic.q_graph(g, &nexts)?;
    let mut mask_next = Vec::with_capacity(n * NUM_ACTIONS);
    let mut live = Vec::with_capacity(n);
    for t in part {
        let m = net.feasible_mask(t.next.position);
        let ok = !t.is_terminal && m.iter().any(|&b| b);
        mask_next.extend_from_slice(if ok { &m } else { &[true; NUM_ACTIONS] });
        live.push(ok as u8 as f64);
    }
    let v_next = g.logsumexp_rows(qn, Some(&mask_next))?;
    let live = g.constant(Tensor::vector(live));
    let v_next = g.mul(v_next, live)?;
    let v_next = g.scale(v_next, cfg.gamma);
    let actions: Vec<usize> = part.iter().map(|t| t.action.index()).collect();
    let q_sa = g.pick(q, &actions)?;
    let x = g.sub(q_sa, v_next)?;
    let x2 = g.square(x);
    let lin = g.weighted_sum(x, &vec![-1.0 / n_total as f64; n])?;
    let quad = g.weighted_sum(x2, &vec![1.0 / (4.0 * cfg.alpha_phi * n_total as f64); n])?;
    let phi = g.add(lin, quad)?;

    let mut mask_s = Vec::with_capacity(n * NUM_ACTIONS);
    let mut w_init = Vec::with_capacity(n);
    for t in part {
        let m = net.feasible_mask(t.state.position);
        mask_s.extend_from_slice(&m);
        w_init.push(if t.is_initial {
            (1.0 - cfg.gamma) / n_initial.max(1) as f64
        } else {
            0.0
        });
    }
    let v0 = g.logsumexp_rows(q, Some(&mask_s))?;
    let init = g.weighted_sum(v0, &w_init)?;
    Ok((phi, init))
}

/// `−J(Q)` for a batch and its gradient, evaluated in fixed-size chunks.
pub fn iq_loss_grads(
    batch: &[Transition],
    critic: &CriticModel,
    net: &Network,
    cfg: &IrlConfig,
) -> Result<(IqLossParts, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty transition batch".into()));
    }
    let n_initial = batch.iter().filter(|t| t.is_initial).count();
    let chunks: Vec<&[Transition]> = batch.chunks(ROWS_PER_CHUNK).collect();
    let parts = par::try_map(&chunks, |part| -> Result<(IqLossParts, Vec<Tensor>)> {
        let mut g = Graph::new();
        let (phi, init) = iq_graph(&mut g, critic, net, part, batch.len(), n_initial, cfg)?;
        let total = g.add(phi, init)?;
        let grads = g.backward(total, &critic.params)?;
        Ok((
            IqLossParts {
                phi_term: g.scalar(phi),
                initial_term: g.scalar(init),
            },
            grads,
        ))
    })?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap();
    for (l, gr) in iter {
        loss.phi_term += l.phi_term;
        loss.initial_term += l.initial_term;
        accumulate(&mut grads, &gr);
    }
    Ok((loss, grads))
}

pub fn iq_loss(
    batch: &[Transition],
    critic: &CriticModel,
    net: &Network,
    cfg: &IrlConfig,
) -> Result<IqLossParts> {
    Ok(iq_loss_grads(batch, critic, net, cfg)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Mini-batch AdamW on `−J(Q)` over the train split's transitions.
pub fn train_critic(
    dataset: &Dataset,
    critic: &mut CriticModel,
    cfg: &IrlConfig,
    seed: u64,
) -> Result<Vec<CriticEpoch>> {
    cfg.validate()?;
    let data: Vec<Transition> = dataset.train().flat_map(transitions).collect();
    if data.is_empty() {
        return Err(Error::Argument("no expert transitions to train on".into()));
    }
    train_on_transitions(&data, &dataset.network, critic, cfg, seed)
}

pub fn train_on_transitions(
    data: &[Transition],
    net: &Network,
    critic: &mut CriticModel,
    cfg: &IrlConfig,
    seed: u64,
) -> Result<Vec<CriticEpoch>> {
    let mut opt = AdamW::new(&critic.params, cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(derive_seed(seed, epoch as u64), 0));
        let (mut sum, mut batches) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Transition> = idx.iter().map(|&i| data[i]).collect();
            let (parts, mut grads) = iq_loss_grads(&batch, critic, net, cfg)?;
            let loss = parts.phi_term + parts.initial_term;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite IQ loss {loss} in epoch {epoch}"
                )));
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut critic.params, &grads)?;
            sum += loss;
            batches += 1;
        }
        let rec = CriticEpoch {
            epoch,
            loss: sum / batches as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("critic epoch {epoch}: loss {:.5}", rec.loss);
        log.push(rec);
    }
    Ok(log)
}

pub fn critic_log_csv(log: &[CriticEpoch], with_seconds: bool) -> String {
    let mut s = String::from(if with_seconds {
        "epoch,loss,seconds\n"
    } else {
        "epoch,loss\n"
    });
    for r in log {
        s.push_str(&format!("{},{}", r.epoch, r.loss));
        if with_seconds {
            s.push_str(&format!(",{:.3}", r.seconds));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests;
