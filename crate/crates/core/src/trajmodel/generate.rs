use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::PolicyModel;
use crate::error::{Error, Result};
use crate::netgrid::{ActionId, EnvState, Network, Position, NUM_ACTIONS};
use crate::numcore::{derive_seed, rng_for, Rng};
use crate::par;
use crate::synthgen::{Status, Trajectory};
use crate::tokenizer::{ContextWindow, StepTokens};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub traj_id: u64,
    pub origin: Position,
    pub destination: Position,
    pub depart_bin: usize,
    pub speed_bin: usize,
    pub user_id: usize,
    pub max_len: usize,
    /// 0 is greedy.
    pub temperature: f64,
    pub seed: u64,
}

/// Sample from `softmax(logits / temperature)` over feasible actions.
/// Temperature 0 takes the argmax, lowest index on ties.
pub fn sample_action(
    logits: &[f64],
    feasible: &[bool],
    temperature: f64,
    rng: &mut Rng,
) -> Result<ActionId> {
    if logits.len() != NUM_ACTIONS || feasible.len() != NUM_ACTIONS {
        return Err(Error::shape(
            "sample_action",
            &[logits.len()],
            &[feasible.len()],
        ));
    }
    if !(temperature >= 0.0) {
        return Err(Error::Argument(format!(
            "temperature {temperature} is negative"
        )));
    }
    let candidates: Vec<usize> = (0..NUM_ACTIONS).filter(|&k| feasible[k]).collect();
    if candidates.is_empty() {
        return Err(Error::DeadEnd(None));
    }
    let best =
        candidates.iter().copied().fold(
            candidates[0],
            |b, k| if logits[k] > logits[b] { k } else { b },
        );
    if temperature == 0.0 || candidates.len() == 1 {
        return ActionId::new(best);
    }
    let max = logits[best] / temperature;
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&k| (logits[k] / temperature - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (&k, w) in candidates.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return ActionId::new(k);
        }
    }
    ActionId::new(*candidates.last().unwrap())
}

/// Autoregressive rollout from `ctx.origin`, conditioning on the trailing K steps.
pub fn generate(ctx: &GenerationContext, model: &PolicyModel, net: &Network) -> Result<Trajectory> {
    net.check_position(ctx.origin)?;
    net.check_position(ctx.destination)?;
    if ctx.origin == ctx.destination {
        return Err(Error::Argument(format!(
            "origin equals destination ({})",
            ctx.origin
        )));
    }
    if ctx.max_len == 0 {
        return Err(Error::Argument("max_len must be at least 1".into()));
    }
    if net.shortest_hops(ctx.origin, ctx.destination).is_none() {
        return Err(Error::Unreachable {
            origin: ctx.origin,
            destination: ctx.destination,
        });
    }
    let mut rng = rng_for(ctx.seed, 0);
    let state = EnvState {
        position: ctx.origin,
        origin: ctx.origin,
        destination: ctx.destination,
        depart_bin: ctx.depart_bin,
        speed_bin: ctx.speed_bin,
        user_id: ctx.user_id,
    };
    let mut steps = vec![StepTokens {
        rtg: 1,
        state,
        action: None,
    }];
    let k = model.cfg.context;
    let mut status = Status::Truncated;
    while steps.len() <= ctx.max_len {
        let here = steps.last().unwrap().state;
        let mask = net.feasible_mask(here.position);
        if !mask.iter().any(|&m| m) {
            status = Status::DeadEnd;
            break;
        }
        let start = steps.len().saturating_sub(k);
        let logits = model.last_logits(&ContextWindow {
            start,
            steps: &steps[start..],
        })?;
        let a = sample_action(&logits, &mask, ctx.temperature, &mut rng)?;
        assert!(mask[a.index()], "sampled an infeasible action");
        let next = net.step(here.position, a)?;
        steps.last_mut().unwrap().action = Some(a);
        steps.push(StepTokens {
            rtg: (next != ctx.destination) as u8,
            state: here.at(next),
            action: None,
        });
        if next == ctx.destination {
            status = Status::Complete;
            break;
        }
    }
    if steps.len() < 2 {
        return Err(Error::DeadEnd(Some(ctx.origin)));
    }
    Ok(Trajectory {
        traj_id: ctx.traj_id,
        user_id: ctx.user_id,
        depart_bin: ctx.depart_bin,
        speed_bin: ctx.speed_bin,
        positions: steps.iter().map(|s| s.state.position).collect(),
        actions: steps.iter().filter_map(|s| s.action).collect(),
        destination: ctx.destination,
        status,
    })
}

/// `n` contexts drawn with replacement from the context tuples of `pool`.
/// Context `i` gets trajectory id `i` and seed `derive_seed(seed, i + 1)`.
pub fn contexts_from(
    pool: &[&Trajectory],
    n: usize,
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<GenerationContext>> {
    if pool.is_empty() && n > 0 {
        return Err(Error::Argument(
            "no trajectories to draw contexts from".into(),
        ));
    }
    let mut rng = rng_for(seed, 0);
    Ok((0..n)
        .map(|i| {
            let t = pool[rng.gen_range(0..pool.len())];
            GenerationContext {
                traj_id: i as u64,
                origin: t.origin(),
                destination: t.destination,
                depart_bin: t.depart_bin,
                speed_bin: t.speed_bin,
                user_id: t.user_id,
                max_len,
                temperature,
                seed: derive_seed(seed, i as u64 + 1),
            }
        })
        .collect())
}

/// One rollout per context, in context order. Failed rollouts are logged,
/// counted and left out.
pub fn generate_corpus(
    contexts: &[GenerationContext],
    model: &PolicyModel,
    net: &Network,
) -> (Vec<Trajectory>, usize) {
    let results = par::map(contexts, |c| generate(c, model, net));
    let mut out = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (c, r) in contexts.iter().zip(results) {
        match r {
            Ok(t) => out.push(t),
            Err(e) => {
                log::warn!("trajectory {} failed: {e}", c.traj_id);
                failed += 1;
            }
        }
    }
    (out, failed)
}
