use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Status, Trajectory, DEPART_BINS, SPEED_BINS};
use crate::error::{Error, Result};
use crate::netgrid::{ActionId, EnvState, Network, Position, NUM_ACTIONS};
use crate::numcore::{derive_seed, rng_for, Rng};
use crate::par;

/// Features per action: progress toward the destination, turn change, stay.
pub const NUM_FEATURES: usize = 3;

/// Ground-truth per-user weights over the action features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceParams {
    pub theta: Vec<[f64; NUM_FEATURES]>,
}

impl PreferenceParams {
    pub fn num_users(&self) -> usize {
        self.theta.len()
    }

    pub fn user(&self, u: usize) -> Result<&[f64; NUM_FEATURES]> {
        self.theta.get(u).ok_or(Error::Index {
            what: "user",
            index: u,
            size: self.theta.len(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("user_id,theta_progress,theta_turn,theta_stay\n");
        for (u, t) in self.theta.iter().enumerate() {
            s.push_str(&format!("{u},{},{},{}\n", t[0], t[1], t[2]));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut theta = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let loc = || format!("theta row {}", i + 1);
            let rec = rec.map_err(|e| Error::parse(loc(), e.to_string()))?;
            if rec.len() != 4 {
                return Err(Error::parse(loc(), "expected 4 columns"));
            }
            let u: usize = rec[0]
                .parse()
                .map_err(|_| Error::parse(loc(), "bad user id"))?;
            if u != theta.len() {
                return Err(Error::parse(
                    loc(),
                    format!("user ids must be dense, got {u}"),
                ));
            }
            let mut t = [0.0f64; NUM_FEATURES];
            for (k, slot) in t.iter_mut().enumerate() {
                *slot = rec[k + 1]
                    .parse()
                    .map_err(|_| Error::parse(loc(), "bad weight"))?;
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::parse(loc(), "non-finite weight"));
            }
            theta.push(t);
        }
        Ok(Self { theta })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

pub fn archetype_of(user: usize, archetypes: usize) -> usize {
    user % archetypes
}

/// `f(s, a)` for one action. `None` when the action is infeasible.
pub fn features(
    net: &Network,
    state: &EnvState,
    prev: Option<ActionId>,
    a: ActionId,
) -> Result<Option<[f64; NUM_FEATURES]>> {
    let here = net
        .shortest_hops(state.position, state.destination)
        .ok_or(Error::Unreachable {
            origin: state.position,
            destination: state.destination,
        })?;
    let next = match net.step(state.position, a) {
        Ok(n) => n,
        Err(_) => return Ok(None),
    };
    let progress = match net.shortest_hops(next, state.destination) {
        Some(d) if d < here => 1.0,
        Some(d) if d == here => 0.0,
        _ => -1.0,
    };
    let turn = prev.map_or(0.0, |p| (p != a) as u8 as f64);
    let stay = (matches!(net, Network::Grid(_)) && a == ActionId::STAY) as u8 as f64;
    Ok(Some([progress, turn, stay]))
}

/// `softmax(θ · f(s, a))` over feasible actions; infeasible actions get exactly 0.
pub fn oracle_action_probs(
    net: &Network,
    state: &EnvState,
    prev: Option<ActionId>,
    theta: &[f64; NUM_FEATURES],
) -> Result<[f64; NUM_ACTIONS]> {
    let mut logits = [f64::NEG_INFINITY; NUM_ACTIONS];
    let mut any = false;
    for (k, slot) in logits.iter_mut().enumerate() {
        if let Some(f) = features(net, state, prev, ActionId::new(k)?)? {
            *slot = f.iter().zip(theta).map(|(x, w)| x * w).sum();
            any = true;
        }
    }
    if !any {
        return Err(Error::DeadEnd(Some(state.position)));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.map(|l| if l.is_finite() { (l - max).exp() } else { 0.0 });
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// All actions attaining the oracle's maximum probability.
pub fn oracle_argmax(probs: &[f64; NUM_ACTIONS]) -> Vec<ActionId> {
    let max = probs.iter().copied().fold(0.0, f64::max);
    (0..NUM_ACTIONS)
        .filter(|&k| probs[k] > 0.0 && probs[k] >= max * (1.0 - 1e-12))
        .map(|k| ActionId::new(k).unwrap())
        .collect()
}

/// Oracle reference for imitation: per decision step, the entropy (nats) of
/// the oracle's action distribution and its largest probability, which is
/// the best achievable top-1 accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleReference {
    pub entropy: f64,
    pub ceiling: f64,
    pub steps: usize,
}

pub fn oracle_reference<'a>(
    net: &Network,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    params: &PreferenceParams,
) -> Result<OracleReference> {
    let (mut h, mut c, mut n) = (0.0, 0.0, 0usize);
    for t in trajectories {
        let theta = params.user(t.user_id)?;
        let ctx = EnvState {
            position: t.origin(),
            origin: t.origin(),
            destination: t.destination,
            depart_bin: t.depart_bin,
            speed_bin: t.speed_bin,
            user_id: t.user_id,
        };
        for (i, _) in t.actions.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| t.actions[j]);
            let p = oracle_action_probs(net, &ctx.at(t.positions[i]), prev, theta)?;
            h -= p
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|x| x * x.ln())
                .sum::<f64>();
            c += p.iter().copied().fold(0.0, f64::max);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument(
            "no decision steps for the oracle reference".into(),
        ));
    }
    Ok(OracleReference {
        entropy: h / n as f64,
        ceiling: c / n as f64,
        steps: n,
    })
}

fn sample(probs: &[f64; NUM_ACTIONS], rng: &mut Rng) -> ActionId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return ActionId::new(k).unwrap();
            }
        }
    }
    ActionId::new(last).unwrap()
}

/// Roll the oracle from `ctx.origin` (taken from `ctx.position`) for at most `max_len` actions.
pub fn gen_trajectory(
    seed: u64,
    traj_id: u64,
    ctx: EnvState,
    theta: &[f64; NUM_FEATURES],
    net: &Network,
    max_len: usize,
) -> Result<Trajectory> {
    net.check_position(ctx.origin)?;
    net.check_position(ctx.destination)?;
    if ctx.origin == ctx.destination {
        return Err(Error::Argument(format!(
            "origin equals destination ({})",
            ctx.origin
        )));
    }
    if net.shortest_hops(ctx.origin, ctx.destination).is_none() {
        return Err(Error::Unreachable {
            origin: ctx.origin,
            destination: ctx.destination,
        });
    }
    let mut rng = rng_for(seed, 0);
    let mut state = ctx.at(ctx.origin);
    let mut positions = vec![ctx.origin];
    let mut actions: Vec<ActionId> = Vec::new();
    let mut status = Status::Truncated;
    while actions.len() < max_len {
        let probs = match oracle_action_probs(net, &state, actions.last().copied(), theta) {
            Ok(p) => p,
            Err(Error::DeadEnd(_)) => {
                status = Status::DeadEnd;
                break;
            }
            Err(e) => return Err(e),
        };
        let a = sample(&probs, &mut rng);
        state = state.at(net.step(state.position, a)?);
        positions.push(state.position);
        actions.push(a);
        if state.arrived() {
            status = Status::Complete;
            break;
        }
    }
    if positions.len() < 2 {
        return Err(Error::Trajectory {
            id: traj_id,
            reason: "dead end at the origin".into(),
        });
    }
    Ok(Trajectory {
        traj_id,
        user_id: ctx.user_id,
        depart_bin: ctx.depart_bin,
        speed_bin: ctx.speed_bin,
        positions,
        actions,
        destination: ctx.destination,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub trajectories: usize,
    /// Archetype weights; user `u` follows archetype `u mod len`.
    pub archetypes: Vec<[f64; NUM_FEATURES]>,
    /// Relative std of the per-user perturbation: `θ_u = θ_arch · (1 + σ·ε)`, so
    /// zero weights stay zero and signs are kept with high probability.
    #[serde(default = "default_noise")]
    pub theta_noise: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// OD sampling rule. `0` draws origin and destination uniformly; `k > 0` first
    /// draws `k` distinct popular OD pairs and every trip picks one of them.
    #[serde(default)]
    pub od_pool: usize,
    /// Per-trip departure offset from the user's home bin, uniform in `[-j, j]`.
    #[serde(default = "default_depart_jitter")]
    pub depart_jitter: usize,
    /// Std of the per-trip speed deviation from the user's typical speed.
    #[serde(default = "default_speed_jitter")]
    pub speed_jitter: f64,
}

fn default_depart_jitter() -> usize {
    1
}

fn default_speed_jitter() -> f64 {
    3.0
}

fn default_noise() -> f64 {
    0.1
}

fn default_max_len() -> usize {
    50
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.users == 0 {
            return bad("synth.users must be at least 1");
        }
        if self.archetypes.is_empty() {
            return bad("synth.archetypes must not be empty");
        }
        if self.archetypes.iter().flatten().any(|x| !x.is_finite()) {
            return bad("synth.archetypes must be finite");
        }
        if !(self.theta_noise >= 0.0 && self.theta_noise.is_finite()) {
            return bad("synth.theta_noise must be a finite non-negative number");
        }
        if self.max_len == 0 {
            return bad("synth.max_len must be at least 1");
        }
        if 2 * self.depart_jitter + 1 > DEPART_BINS {
            return bad("synth.depart_jitter spans more than a day");
        }
        if !(self.speed_jitter >= 0.0 && self.speed_jitter.is_finite()) {
            return bad("synth.speed_jitter must be a finite non-negative number");
        }
        Ok(())
    }
}

const THETA_STREAM: u64 = 1;
const HABIT_STREAM: u64 = 2;
const OD_STREAM: u64 = 3;

fn draw_od(net: &Network, rng: &mut Rng) -> Result<(Position, Position)> {
    let n = net.num_positions();
    let origin = rng.gen_range(0..n);
    for _ in 0..1000 {
        let d = rng.gen_range(0..n);
        if d != origin && net.shortest_hops(origin, d).is_some() {
            return Ok((origin, d));
        }
    }
    Err(Error::Unreachable {
        origin,
        destination: origin,
    })
}

/// Draw per-user θ, then `cfg.trajectories` oracle rollouts with seeds `derive_seed(seed, id)`.
pub fn gen_dataset(
    net: &Network,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Dataset, PreferenceParams)> {
    cfg.validate()?;
    if net.num_positions() < 2 {
        return Err(Error::Config("network needs at least 2 positions".into()));
    }
    let noise = Normal::new(0.0, cfg.theta_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut rng = rng_for(seed, THETA_STREAM);
    let theta: Vec<[f64; NUM_FEATURES]> = (0..cfg.users)
        .map(|u| {
            let base = cfg.archetypes[archetype_of(u, cfg.archetypes.len())];
            base.map(|w| {
                if cfg.theta_noise > 0.0 {
                    w * (1.0 + noise.sample(&mut rng))
                } else {
                    w
                }
            })
        })
        .collect();
    // Each user departs around a home hour at a typical speed.
    let mut rng = rng_for(seed, HABIT_STREAM);
    let habits: Vec<(usize, f64)> = (0..cfg.users)
        .map(|_| (rng.gen_range(0..DEPART_BINS), rng.gen_range(20.0..80.0)))
        .collect();

    let mut pool = Vec::with_capacity(cfg.od_pool);
    let mut rng = rng_for(seed, OD_STREAM);
    for _ in 0..cfg.od_pool * 1000 {
        if pool.len() == cfg.od_pool {
            break;
        }
        let od = draw_od(net, &mut rng)?;
        if !pool.contains(&od) {
            pool.push(od);
        }
    }
    if pool.len() < cfg.od_pool {
        return Err(Error::Config(format!(
            "synth.od_pool = {} exceeds the distinct reachable OD pairs",
            cfg.od_pool
        )));
    }

    let trajectories = par::try_map_range(cfg.trajectories, |i| {
        let tseed = derive_seed(seed, i as u64);
        let mut rng = rng_for(tseed, 1);
        let user = rng.gen_range(0..cfg.users);
        let (home, speed) = habits[user];
        let (origin, destination) = if pool.is_empty() {
            draw_od(net, &mut rng)?
        } else {
            pool[rng.gen_range(0..pool.len())]
        };
        let j = cfg.depart_jitter;
        let depart_bin = (home + DEPART_BINS + rng.gen_range(0..2 * j + 1) - j) % DEPART_BINS;
        let jitter: f64 = Normal::new(0.0, cfg.speed_jitter).unwrap().sample(&mut rng);
        let speed_bin = (speed + jitter).round().clamp(0.0, (SPEED_BINS - 1) as f64) as usize;
        let ctx = EnvState {
            position: origin,
            origin,
            destination,
            depart_bin,
            speed_bin,
            user_id: user,
        };
        gen_trajectory(tseed, i as u64, ctx, &theta[user], net, cfg.max_len)
    })?;
    let ds = Dataset::new(net.clone(), cfg.users, trajectories)?;
    Ok((ds, PreferenceParams { theta }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgrid::{GridSpec, LinkGraph};
    use proptest::prelude::*;

    fn grid(w: usize, h: usize) -> (GridSpec, Network) {
        let g = GridSpec::new(w, h).unwrap();
        (g, Network::Grid(g))
    }

    fn ctx(origin: usize, destination: usize) -> EnvState {
        EnvState {
            position: origin,
            origin,
            destination,
            depart_bin: 0,
            speed_bin: 0,
            user_id: 0,
        }
    }

    #[test]
    fn zero_weights_are_uniform_over_feasible() {
        let (_, net) = grid(5, 5);
        let p = oracle_action_probs(&net, &ctx(0, 24), None, &[0.0; 3]).unwrap();
        let mask = net.feasible_mask(0);
        for k in 0..9 {
            assert_eq!(p[k], if mask[k] { 0.25 } else { 0.0 });
        }
    }

    #[test]
    fn strong_progress_weight_concentrates_on_hop_reducing_moves() {
        let (g, net) = grid(5, 5);
        let s = ctx(g.cell(2, 2), g.cell(0, 4));
        let p = oracle_action_probs(&net, &s, None, &[10.0, 0.0, 0.0]).unwrap();
        let good: f64 = (0..9)
            .filter(|&k| {
                features(&net, &s, None, ActionId::new(k).unwrap())
                    .unwrap()
                    .unwrap()[0]
                    > 0.0
            })
            .map(|k| p[k])
            .sum();
        assert!(good >= 0.99, "{good}");
    }

    #[test]
    fn single_feasible_action_has_probability_one() {
        let net = Network::Links(LinkGraph::new(vec![vec![1], vec![]]).unwrap());
        let p = oracle_action_probs(&net, &ctx(0, 1), None, &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unreachable_destination_is_an_error() {
        let net = Network::Links(LinkGraph::new(vec![vec![1], vec![], vec![]]).unwrap());
        assert!(matches!(
            gen_trajectory(0, 0, ctx(0, 2), &[1.0, 0.0, 0.0], &net, 10),
            Err(Error::Unreachable { .. })
        ));
    }

    #[test]
    fn adjacent_od_with_progress_seeker_takes_one_step() {
        let (g, net) = grid(5, 5);
        let t = gen_trajectory(
            3,
            0,
            ctx(g.cell(2, 2), g.cell(2, 3)),
            &[40.0, 0.0, 0.0],
            &net,
            50,
        )
        .unwrap();
        assert_eq!(t.positions, vec![g.cell(2, 2), g.cell(2, 3)]);
        assert_eq!(t.actions, vec![ActionId::new(5).unwrap()]);
        assert!(t.is_complete());
    }

    #[test]
    fn generation_is_seeded_and_truncates() {
        let (_, net) = grid(5, 5);
        let theta = [1.0, -0.5, -1.0];
        let a = gen_trajectory(11, 0, ctx(0, 24), &theta, &net, 50).unwrap();
        assert_eq!(
            a,
            gen_trajectory(11, 0, ctx(0, 24), &theta, &net, 50).unwrap()
        );
        let t = gen_trajectory(11, 0, ctx(0, 24), &theta, &net, 1).unwrap();
        assert_eq!(t.status, Status::Truncated);
        assert_eq!(t.num_steps(), 1);
        t.validate(&net).unwrap();
    }

    #[test]
    fn dataset_generation_examples() {
        let (_, net) = grid(5, 5);
        let mut cfg = SynthConfig {
            users: 3,
            trajectories: 0,
            archetypes: vec![[3.0, 0.0, -1.0], [2.0, -2.0, -1.0]],
            theta_noise: 0.1,
            max_len: 50,
            od_pool: 0,
            depart_jitter: 1,
            speed_jitter: 3.0,
        };
        let (ds, theta) = gen_dataset(&net, &cfg, 5).unwrap();
        assert!(ds.is_empty());
        assert_eq!(theta.num_users(), 3);
        cfg.users = 1;
        cfg.trajectories = 30;
        let (ds, theta) = gen_dataset(&net, &cfg, 5).unwrap();
        assert!(ds.trajectories.iter().all(|t| t.user_id == 0));
        assert_eq!(theta.num_users(), 1);
        let (again, _) = gen_dataset(&net, &cfg, 5).unwrap();
        assert_eq!(ds.to_text(), again.to_text());
        cfg.users = 0;
        assert!(matches!(gen_dataset(&net, &cfg, 5), Err(Error::Config(_))));
    }

    #[test]
    fn two_thousand_trajectories_pass_invariants() {
        let (_, net) = grid(5, 5);
        let cfg = SynthConfig {
            users: 20,
            trajectories: 2000,
            archetypes: vec![[3.0, 0.0, -1.0], [2.0, -2.0, -1.0]],
            theta_noise: 0.1,
            max_len: 50,
            od_pool: 0,
            depart_jitter: 1,
            speed_jitter: 3.0,
        };
        let (ds, theta) = gen_dataset(&net, &cfg, 42).unwrap();
        assert_eq!(ds.len(), 2000);
        for t in &ds.trajectories {
            t.validate(&net).unwrap();
        }
        let back = PreferenceParams::parse_csv(&theta.to_csv()).unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn od_pool_and_fixed_habits() {
        let (_, net) = grid(5, 5);
        let cfg = SynthConfig {
            users: 5,
            trajectories: 200,
            archetypes: vec![[3.0, 0.0, -1.0]],
            theta_noise: 0.0,
            max_len: 50,
            od_pool: 4,
            depart_jitter: 0,
            speed_jitter: 0.0,
        };
        let (ds, _) = gen_dataset(&net, &cfg, 3).unwrap();
        let ods: std::collections::BTreeSet<_> = ds
            .trajectories
            .iter()
            .map(|t| (t.origin(), t.destination))
            .collect();
        assert_eq!(ods.len(), 4);
        for u in 0..5 {
            let ctx: std::collections::BTreeSet<_> = ds
                .trajectories
                .iter()
                .filter(|t| t.user_id == u)
                .map(|t| (t.depart_bin, t.speed_bin))
                .collect();
            assert!(ctx.len() <= 1);
        }
        let too_many = SynthConfig {
            od_pool: 25 * 24 + 1,
            ..cfg.clone()
        };
        assert!(matches!(
            gen_dataset(&net, &too_many, 3),
            Err(Error::Config(_))
        ));
        let wide = SynthConfig {
            depart_jitter: DEPART_BINS,
            ..cfg
        };
        assert!(matches!(gen_dataset(&net, &wide, 3), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn oracle_probs_are_distributions(
            w in 2usize..7, h in 2usize..7, pos in 0usize..49, dest in 0usize..49,
            t0 in -5.0f64..5.0, t1 in -5.0f64..5.0, t2 in -5.0f64..5.0, prev in proptest::option::of(0usize..9),
        ) {
            let (g, net) = grid(w, h);
            let (pos, dest) = (pos % g.num_cells(), dest % g.num_cells());
            let prev = prev.map(|a| ActionId::new(a).unwrap());
            let p = oracle_action_probs(&net, &ctx(pos, dest), prev, &[t0, t1, t2]).unwrap();
            let mask = net.feasible_mask(pos);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for k in 0..9 {
                prop_assert!(p[k] >= 0.0);
                if !mask[k] { prop_assert_eq!(p[k], 0.0); }
            }
        }
    }
}
