use super::*;
use crate::netgrid::{GridSpec, LinkGraph};
use crate::numcore::finite_diff_check;
use crate::synthgen::Status;
use proptest::prelude::*;

fn grid() -> Network {
    Network::Grid(GridSpec::new(5, 5).unwrap())
}

fn small_cfg() -> CriticConfig {
    CriticConfig {
        d: 8,
        ..CriticConfig::default()
    }
}

fn critic_for(net: &Network, users: usize, seed: u64) -> CriticModel {
    let vocab = VocabSpec::for_network(net, users, 32, false).unwrap();
    CriticModel::new(small_cfg(), vocab, seed).unwrap()
}

fn state(pos: usize, dest: usize, user: usize) -> EnvState {
    EnvState {
        position: pos,
        origin: pos,
        destination: dest,
        depart_bin: 3,
        speed_bin: 40,
        user_id: user,
    }
}

/// Critic whose Q is the same vector `q` for every state: only `w_pve` row 0
/// and a unit user embedding are non-zero.
fn constant_q(net: &Network, q: [f64; NUM_ACTIONS]) -> CriticModel {
    let vocab = VocabSpec::for_network(net, 2, 32, false).unwrap();
    let mut m = CriticModel::zeroed(small_cfg(), vocab).unwrap();
    for u in 0..2 {
        m.params.get_mut(E_USER).row_mut(u)[0] = 1.0;
    }
    m.params.get_mut(W_PVE).row_mut(0).copy_from_slice(&q);
    m
}

fn straight_traj(net: &Network) -> Trajectory {
    let positions = vec![0, 6, 12, 18];
    let actions = positions
        .windows(2)
        .map(|w| net.action_between(w[0], w[1]).unwrap())
        .collect();
    Trajectory {
        traj_id: 1,
        user_id: 0,
        depart_bin: 3,
        speed_bin: 40,
        positions,
        actions,
        destination: 18,
        status: Status::Complete,
    }
}

#[test]
fn zero_critic_is_zero_everywhere() {
    let net = grid();
    let m = CriticModel::zeroed(
        small_cfg(),
        VocabSpec::for_network(&net, 2, 32, false).unwrap(),
    )
    .unwrap();
    let s = state(12, 24, 1);
    assert_eq!(m.q_values(&s).unwrap(), [0.0; NUM_ACTIONS]);
    assert!((v_star(&s, &m, &net).unwrap() - 9f64.ln()).abs() < 1e-12);
    assert!((v_star(&state(0, 24, 1), &m, &net).unwrap() - 4f64.ln()).abs() < 1e-12);
    for t in transitions(&straight_traj(&net)) {
        assert_eq!(
            recover_reward(&t, &m, &net, 0.9).unwrap() == 0.0,
            t.is_terminal
        );
    }
}

#[test]
fn zeroed_pve_makes_outputs_user_invariant() {
    let net = grid();
    let mut m = critic_for(&net, 3, 5);
    let s0 = state(7, 19, 0);
    let s2 = state(7, 19, 2);
    assert_ne!(m.q_values(&s0).unwrap(), m.q_values(&s2).unwrap());
    m.zero_pve();
    assert_eq!(m.q_values(&s0).unwrap(), m.q_values(&s2).unwrap());
    assert_eq!(
        critic_policy(&s0, &m, &net).unwrap(),
        critic_policy(&s2, &m, &net).unwrap()
    );
}

#[test]
fn user_difference_is_linear_in_pve() {
    let net = grid();
    let mut m = critic_for(&net, 3, 6);
    m.params.get_mut(W_BVE).scale_inplace(0.0);
    let q1 = m.q_values(&state(7, 19, 1)).unwrap();
    let q2 = m.q_values(&state(7, 19, 2)).unwrap();
    let e = m.params.get(E_USER);
    let w = m.params.get(W_PVE);
    for a in 0..NUM_ACTIONS {
        let expect: f64 = (0..m.cfg.d)
            .map(|k| (e.get2(1, k) - e.get2(2, k)) * w.get2(k, a))
            .sum();
        assert!((q1[a] - q2[a] - expect).abs() < 1e-12);
    }
}

#[test]
fn v_star_examples() {
    let net = grid();
    let s = state(12, 24, 0);
    assert!((v_star(&s, &constant_q(&net, [0.0; 9]), &net).unwrap() - 9f64.ln()).abs() < 1e-12);
    let c = 1.7;
    assert!((v_star(&s, &constant_q(&net, [c; 9]), &net).unwrap() - (c + 9f64.ln())).abs() < 1e-12);

    let links = Network::Links(LinkGraph::new(vec![vec![1], vec![2, 0], vec![]]).unwrap());
    let m = constant_q(&links, [c, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!((v_star(&state(0, 2, 0), &m, &links).unwrap() - c).abs() < 1e-12);
    let m = constant_q(&links, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!((v_star(&state(1, 2, 0), &m, &links).unwrap() - 1.31326).abs() < 1e-5);
    assert!(matches!(
        v_star(&state(2, 0, 0), &m, &links),
        Err(Error::DeadEnd(Some(2)))
    ));
}

#[test]
fn recovered_reward_plug_in() {
    let net = grid();
    let mut q = [0.0; 9];
    q[8] = 1.0;
    // Q(s, ·) = e_8 at s only: route it through the origin-specific embedding.
    let vocab = VocabSpec::for_network(&net, 2, 32, false).unwrap();
    let mut m = CriticModel::zeroed(small_cfg(), vocab).unwrap();
    m.params.get_mut(E_O).row_mut(0)[0] = 1.0;
    m.params.get_mut(W_PVE).row_mut(0).copy_from_slice(&q);
    let t = Transition {
        state: state(0, 24, 0),
        action: ActionId::new(8).unwrap(),
        next: EnvState {
            origin: 6,
            ..state(6, 24, 0)
        },
        is_initial: true,
        is_terminal: false,
    };
    assert!((recover_reward(&t, &m, &net, 0.9).unwrap() + 0.97750).abs() < 1e-5);
    let term = Transition {
        is_terminal: true,
        ..t
    };
    assert_eq!(recover_reward(&term, &m, &net, 0.9).unwrap(), 1.0);
}

#[test]
fn critic_policy_examples() {
    let net = grid();
    let u = critic_policy(&state(0, 24, 0), &constant_q(&net, [0.3; 9]), &net).unwrap();
    let mask = net.feasible_mask(0);
    for a in 0..NUM_ACTIONS {
        assert_eq!(u[a], if mask[a] { 0.25 } else { 0.0 });
    }
    let mut q = [0.0; 9];
    q[4] = 10.0;
    assert!(critic_policy(&state(12, 24, 0), &constant_q(&net, q), &net).unwrap()[4] >= 0.99);
}

#[test]
fn initial_term_with_zero_critic() {
    let net = grid();
    let m = CriticModel::zeroed(
        small_cfg(),
        VocabSpec::for_network(&net, 2, 32, false).unwrap(),
    )
    .unwrap();
    let batch: Vec<Transition> = (0..3)
        .map(|i| {
            let s = state(6 + i, 24, 0);
            Transition {
                state: s,
                action: ActionId::new(8).unwrap(),
                next: s.at(11 + i),
                is_initial: true,
                is_terminal: false,
            }
        })
        .collect();
    let parts = iq_loss(&batch, &m, &net, &IrlConfig::default()).unwrap();
    assert!((parts.initial_term - 0.21972).abs() < 1e-5);
    let x = -0.9 * 9f64.ln();
    assert!((parts.phi_term + (x - x * x / 2.0)).abs() < 1e-12);
}

#[test]
fn single_terminal_transition_optimum_is_two_alpha() {
    let net = grid();
    let mut m = critic_for(&net, 1, 2);
    let s = state(18, 24, 0);
    let t = Transition {
        state: s,
        action: ActionId::new(8).unwrap(),
        next: s.at(24),
        is_initial: false,
        is_terminal: true,
    };
    let cfg = IrlConfig {
        alpha_phi: 0.35,
        lr: 0.01,
        ..IrlConfig::default()
    };
    let q0 = m.q_values(&s).unwrap()[8];
    let parts = iq_loss(&[t], &m, &net, &cfg).unwrap();
    assert_eq!(parts.initial_term, 0.0);
    assert!((parts.phi_term - (-q0 + q0 * q0 / (4.0 * 0.35))).abs() < 1e-12);
    let cfg = IrlConfig {
        epochs: 3000,
        ..cfg
    };
    train_on_transitions(&[t], &net, &mut m, &cfg, 0).unwrap();
    let q = m.q_values(&s).unwrap()[8];
    assert!((q - 0.7).abs() < 1e-4, "Q = {q}");
}

#[test]
fn gradient_matches_finite_differences() {
    let links = Network::Links(LinkGraph::new(vec![vec![1, 2], vec![2, 0], vec![0]]).unwrap());
    let vocab = VocabSpec::for_network(&links, 2, 32, false).unwrap();
    let m = CriticModel::new(
        CriticConfig {
            d: 4,
            init_std: 0.5,
            ..CriticConfig::default()
        },
        vocab,
        9,
    )
    .unwrap();
    let tr = |p: usize, a: usize, n: usize, init: bool, term: bool, u: usize| Transition {
        state: EnvState {
            origin: 0,
            ..state(p, 2, u)
        },
        action: ActionId::new(a).unwrap(),
        next: EnvState {
            origin: 0,
            ..state(n, 2, u)
        },
        is_initial: init,
        is_terminal: term,
    };
    let batch = vec![
        tr(0, 0, 1, true, false, 0),
        tr(1, 1, 0, false, false, 1),
        tr(0, 1, 2, false, true, 1),
    ];
    let cfg = IrlConfig::default();
    let check = finite_diff_check(&m.params, 1e-6, |p| {
        let probe = CriticModel {
            params: p.clone(),
            ..m.clone()
        };
        let (l, g) = iq_loss_grads(&batch, &probe, &links, &cfg)?;
        Ok((l.phi_term + l.initial_term, g))
    })
    .unwrap();
    assert!(check.max_rel_err <= 1e-4, "{:?}", check.per_param);
}

#[test]
fn zero_learning_rate_leaves_critic_unchanged() {
    let net = grid();
    let mut m = critic_for(&net, 1, 4);
    let before = m.clone();
    let ts = transitions(&straight_traj(&net));
    train_on_transitions(
        &ts,
        &net,
        &mut m,
        &IrlConfig {
            lr: 0.0,
            epochs: 3,
            ..IrlConfig::default()
        },
        1,
    )
    .unwrap();
    assert_eq!(m, before);
}

#[test]
fn tabular_chain_recovers_expert_actions() {
    // Four links, each may move to any link; the expert walks 0 → 1 → 2 → 3.
    let links = Network::Links(LinkGraph::new(vec![vec![0, 1, 2, 3]; 4]).unwrap());
    let traj = Trajectory {
        traj_id: 0,
        user_id: 0,
        depart_bin: 0,
        speed_bin: 0,
        positions: vec![0, 1, 2, 3],
        actions: vec![
            ActionId::new(1).unwrap(),
            ActionId::new(2).unwrap(),
            ActionId::new(3).unwrap(),
        ],
        destination: 3,
        status: Status::Complete,
    };
    let ts = transitions(&traj);
    let mut m = critic_for(&links, 1, 3);
    let cfg = IrlConfig {
        lr: 0.01,
        epochs: 400,
        ..IrlConfig::default()
    };
    train_on_transitions(&ts, &links, &mut m, &cfg, 0).unwrap();
    for t in &ts {
        let p = critic_policy(&t.state, &m, &links).unwrap();
        let best = (0..NUM_ACTIONS)
            .max_by(|&a, &b| p[a].total_cmp(&p[b]))
            .unwrap();
        assert_eq!(
            best,
            t.action.index(),
            "state {} probs {p:?}",
            t.state.position
        );
    }
}

#[test]
fn checkpoint_round_trip() {
    let net = grid();
    let m = critic_for(&net, 2, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("critic.ckpt");
    m.save(&path, serde_json::json!({"epochs": 1})).unwrap();
    let (back, meta) = CriticModel::load(&path, Some(&m.vocab)).unwrap();
    assert_eq!(back, m);
    assert_eq!(meta["epochs"], 1);
    let other = VocabSpec::for_network(&net, 3, 32, false).unwrap();
    assert!(CriticModel::load(&path, Some(&other)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn v_star_is_bounded_by_max_and_log_count(seed in 0u64..1000, pos in 0usize..25, dest in 0usize..25) {
        let net = grid();
        let m = critic_for(&net, 1, seed);
        let s = state(pos, dest, 0);
        let q = m.q_values(&s).unwrap();
        let mask = net.feasible_mask(pos);
        let feas: Vec<f64> = (0..9).filter(|&a| mask[a]).map(|a| q[a]).collect();
        let max = feas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = v_star(&s, &m, &net).unwrap();
        prop_assert!(v >= max - 1e-12);
        prop_assert!(v <= max + (feas.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn discounted_rewards_telescope(seed in 0u64..1000, complete in any::<bool>()) {
        let net = grid();
        let m = critic_for(&net, 1, seed);
        let mut traj = straight_traj(&net);
        if !complete {
            traj.status = Status::Truncated;
            traj.destination = 24;
        }
        let gamma = 0.9;
        let r = trajectory_rewards(&traj, &m, &net, gamma).unwrap();
        let ts = transitions(&traj);
        let lhs: f64 = r.iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum();
        let mut rhs = m.q_values(&ts[0].state).unwrap()[ts[0].action.index()];
        for (t, tr) in ts.iter().enumerate().skip(1) {
            let q = m.q_values(&tr.state).unwrap()[tr.action.index()];
            rhs += gamma.powi(t as i32) * (q - v_star(&tr.state, &m, &net).unwrap());
        }
        let last = ts.last().unwrap();
        if !last.is_terminal {
            rhs -= gamma.powi(ts.len() as i32) * v_star(&last.next, &m, &net).unwrap();
        }
        prop_assert!((lhs - rhs).abs() < 1e-10);
        for (t, tr) in ts.iter().enumerate() {
            prop_assert!((r[t] - recover_reward(tr, &m, &net, gamma).unwrap()).abs() < 1e-12);
        }
    }
}
