//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The benchmark pipeline runs through the
//! `trajforge` binary on `configs/benchmark.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use rand::Rng;
use tempfile::TempDir;
use trajforge::analysis::{attention_rows, cluster_accuracy, combinations_of, two_means};
use trajforge::metrics::{
    bigram_entropy, bleu, cosine, evaluate, jaccard, jsd, route_choice_entropy, unigram_entropy,
    Pairing,
};
use trajforge::netgrid::{ActionId, EnvState, GridSpec, LinkGraph, Network, NUM_ACTIONS};
use trajforge::numcore::{finite_diff_check, rng_for};
use trajforge::pretrain::{
    batch_grads, encode_all, eval_policy, oracle_fidelity, training_windows,
};
use trajforge::rewardirl::{
    critic_policy, iq_loss_grads, train_on_transitions, transitions, CriticConfig, CriticModel,
    IrlConfig,
};
use trajforge::rmft::compute_gae;
use trajforge::synthgen::{
    archetype_of, gen_dataset, oracle_action_probs, oracle_argmax, Dataset, PreferenceParams,
    Status, SynthConfig, Trajectory,
};
use trajforge::tokenizer::{ContextWindow, VocabSpec};
use trajforge::trajmodel::{ModelConfig, PolicyModel};
use trajforge_cli::config::RunConfig;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want} ± {tol:e}"))
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn benchmark_config() -> PathBuf {
    root().join("configs/benchmark.json")
}

fn trajforge(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_trajforge"))
        .args(args)
        .arg("--config")
        .arg(benchmark_config())
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("TRAJFORGE_SEED")
        .stdout(Stdio::null())
        .status()
        .map_err(|e| format!("cannot run trajforge: {e}"))?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("trajforge {} failed with {status}", args.join(" ")))
    }
}

const CHAIN: [&str; 8] = [
    "synth", "pretrain", "reward", "finetune", "generate", "eval", "analyze", "bench",
];

fn run_chain(out: &Path) -> Result<f64, String> {
    let t0 = Instant::now();
    for c in CHAIN {
        trajforge(out, &[c])?;
    }
    Ok(t0.elapsed().as_secs_f64())
}

fn seconds(out: &Path, command: &str) -> f64 {
    let text = fs::read_to_string(out.join(format!("timing_{command}.json"))).unwrap_or_default();
    serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v["seconds"].as_f64())
        .unwrap_or(f64::NAN)
}

fn metrics(out: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(out.join("metrics.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn csv_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(format!("{}: header is not `{header}`", path.display()));
    }
    let width = header.split(',').count();
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(format!(
            "{}: row {:?} has {} fields",
            path.display(),
            r,
            r.len()
        ));
    }
    Ok(rows)
}

/// The benchmark run shared by criteria 4 to 8.
struct Bench {
    _dir: TempDir,
    out: PathBuf,
    cfg: RunConfig,
    net: Network,
    data: Dataset,
    theta: PreferenceParams,
    chain_seconds: f64,
}

impl Bench {
    fn new() -> Result<Self, String> {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let out = dir.path().join("run");
        let chain_seconds = run_chain(&out)?;
        let cfg = RunConfig::load(&benchmark_config()).map_err(|e| e.to_string())?;
        let net = cfg.network().map_err(|e| e.to_string())?;
        let data = Dataset::load(&out.join("dataset.txt"), None)
            .and_then(|d| d.split(cfg.data.eval_fraction, cfg.seed))
            .map_err(|e| e.to_string())?;
        let theta =
            PreferenceParams::load(&out.join("oracle_theta.csv")).map_err(|e| e.to_string())?;
        Ok(Self {
            _dir: dir,
            out,
            cfg,
            net,
            data,
            theta,
            chain_seconds,
        })
    }

    fn policy(&self, name: &str) -> Result<PolicyModel, String> {
        PolicyModel::load(&self.out.join(name), None)
            .map(|m| m.0)
            .map_err(|e| e.to_string())
    }
}

fn gradient_integrity() -> Check {
    let t0 = Instant::now();
    let net = Network::Grid(GridSpec::new(4, 4).unwrap());
    let sc = SynthConfig {
        users: 2,
        trajectories: 4,
        archetypes: vec![[3.0, -1.0, -2.0]],
        theta_noise: 0.0,
        max_len: 20,
        od_pool: 0,
        depart_jitter: 1,
        speed_jitter: 3.0,
    };
    let (ds, _) = gen_dataset(&net, &sc, 5).map_err(|e| e.to_string())?;
    let vocab = VocabSpec::for_network(&net, 2, 32, false).map_err(|e| e.to_string())?;
    let mcfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context: 4,
        dropout: 0.0,
        max_timestep: 32,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let model = PolicyModel::new(mcfg, vocab.clone(), 2).map_err(|e| e.to_string())?;
    let eps = encode_all(ds.trajectories.iter()).map_err(|e| e.to_string())?;
    let windows: Vec<ContextWindow> = training_windows(&eps, 4, 2)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(e, s, l)| eps[e].window(s, l))
        .collect();
    let pre = finite_diff_check(&model.params, 1e-5, |p| {
        let mut m = model.clone();
        m.params = p.clone();
        batch_grads(&m, &windows, &net, 0, false)
    })
    .map_err(|e| e.to_string())?;

    let critic = CriticModel::new(
        CriticConfig {
            d: 8,
            init_std: 0.5,
            ..CriticConfig::default()
        },
        vocab,
        3,
    )
    .map_err(|e| e.to_string())?;
    let batch: Vec<_> = ds.trajectories.iter().flat_map(transitions).collect();
    let icfg = IrlConfig::default();
    let iq = finite_diff_check(&critic.params, 1e-6, |p| {
        let probe = CriticModel {
            params: p.clone(),
            ..critic.clone()
        };
        let (l, g) = iq_loss_grads(&batch, &probe, &net, &icfg)?;
        Ok((l.phi_term + l.initial_term, g))
    })
    .map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        pre.max_rel_err <= 1e-4 && iq.max_rel_err <= 1e-4 && secs <= 60.0,
        format!(
            "pretrain loss max rel err {:.2e} over {} groups, IQ loss {:.2e} over {} groups, {secs:.1}s",
            pre.max_rel_err,
            pre.per_param.len(),
            iq.max_rel_err,
            iq.per_param.len()
        ),
    )
}

fn path(positions: &[usize], depart: usize) -> Trajectory {
    Trajectory {
        traj_id: 0,
        user_id: 0,
        depart_bin: depart,
        speed_bin: 0,
        destination: *positions.last().unwrap(),
        positions: positions.to_vec(),
        actions: vec![ActionId::STAY; positions.len() - 1],
        status: Status::Complete,
    }
}

fn metric_oracles() -> Check {
    let e = |r: trajforge::error::Result<f64>| r.map_err(|e| e.to_string());
    let tol = 1e-9;
    let mut n = 0;
    let mut check = |name: &str, got: f64, want: f64| {
        n += 1;
        close(name, got, want, tol)
    };
    check(
        "jaccard identical",
        e(jaccard(&[1, 2, 3], &[1, 2, 3]))?,
        1.0,
    )?;
    check("jaccard disjoint", e(jaccard(&[1, 2], &[3, 4]))?, 0.0)?;
    check("jaccard overlap", e(jaccard(&[1, 2, 3], &[2, 3, 4]))?, 0.5)?;
    check("cosine identical", e(cosine(&[4, 5, 5], &[4, 5, 5]))?, 1.0)?;
    check("cosine disjoint", e(cosine(&[1, 2], &[3]))?, 0.0)?;
    check(
        "cosine (1,1,0)·(1,0,0)",
        e(cosine(&[7, 8], &[7]))?,
        0.5f64.sqrt(),
    )?;
    check(
        "bleu identical",
        e(bleu(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5], 4))?,
        1.0,
    )?;
    check(
        "bleu brevity",
        e(bleu(&[2, 3], &[1, 2, 3, 4], 1))?,
        (-1.0f64).exp(),
    )?;
    // Every order smoothed to ε, so the geometric mean is ε itself.
    check("bleu no overlap", e(bleu(&[7, 8, 9], &[1, 2, 3], 4))?, 1e-9)?;
    check("jsd equal", e(jsd(&[0.2, 0.8], &[0.2, 0.8]))?, 0.0)?;
    let ln2 = std::f64::consts::LN_2;
    check("jsd disjoint", e(jsd(&[1.0, 0.0], &[0.0, 1.0]))?, ln2)?;
    let half = 0.5 * (2.0f64 / 1.5).ln() + 0.25 * ((0.5f64 / 0.75).ln() + 2f64.ln());
    check("jsd (1,0)|(½,½)", e(jsd(&[1.0, 0.0], &[0.5, 0.5]))?, half)?;
    close("jsd (1,0)|(½,½) 5 places", half, 0.21576, 5e-6)?;
    check(
        "UE one position",
        e(unigram_entropy(&[path(&[3, 3, 3], 0)]))?,
        0.0,
    )?;
    check("UE two", e(unigram_entropy(&[path(&[1, 2], 0)]))?, 1.0)?;
    check(
        "UE four",
        e(unigram_entropy(&[path(&[1, 2], 0), path(&[3, 4], 0)]))?,
        2.0,
    )?;
    check(
        "BE repeated",
        e(bigram_entropy(&[path(&[1, 2], 0), path(&[1, 2], 0)]))?,
        0.0,
    )?;
    check(
        "BE two",
        e(bigram_entropy(&[path(&[1, 2], 0), path(&[2, 1], 0)]))?,
        1.0,
    )?;
    check(
        "BE length-3 path",
        e(bigram_entropy(&[path(&[1, 2, 3], 0)]))?,
        1.0,
    )?;
    let a = path(&[1, 2], 5);
    check("RCE repeated", e(route_choice_entropy(&[&a, &a]))?, 0.0)?;
    check(
        "RCE three",
        e(route_choice_entropy(&[&path(&[1, 2, 3, 4], 5)]))?,
        3f64.ln(),
    )?;
    let (c, d) = (path(&[1, 2], 6), path(&[2, 3], 6));
    let rce = e(route_choice_entropy(&[&a, &a, &c, &d]))?;
    check(
        "RCE (2,1,1)",
        rce,
        -(0.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln()),
    )?;
    close("RCE (2,1,1) 5 places", rce, 1.03972, 5e-6)?;
    Ok(format!("{n} examples within 1e-9, disjoint JSD = ln 2"))
}

fn gae_exactness() -> Check {
    let a = compute_gae(&[1.0], &[0.5, 0.0], 0.9, 1.0).map_err(|e| e.to_string())?;
    close("single step", a[0], 0.5, 1e-12)?;
    let a = compute_gae(&[0.0, 1.0], &[0.0; 3], 0.9, 0.95 / 0.9).map_err(|e| e.to_string())?;
    close("two-step A0", a[0], 0.95, 1e-12)?;
    close("two-step A1", a[1], 1.0, 1e-12)?;
    let mut rng = rng_for(2024, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.gen_range(1..40);
        let gamma: f64 = rng.gen_range(0.01..0.99);
        let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let adv =
            compute_gae(&rewards, &vec![0.0; len + 1], gamma, 1.0).map_err(|e| e.to_string())?;
        for t in 0..len {
            let brute: f64 = (t..len)
                .map(|k| gamma.powi((k - t) as i32) * rewards[k])
                .sum();
            worst = worst.max((adv[t] - brute).abs());
        }
    }
    ensure(
        worst <= 1e-12,
        format!("hand examples exact; 1000 random episodes, max |A − Σγᵏr| = {worst:.1e}"),
    )
}

fn pretraining_fidelity(b: &Bench) -> Check {
    let policy = b.policy("policy.ckpt")?;
    let f = oracle_fidelity(b.data.eval(), &policy, &b.net, &b.theta).map_err(|e| e.to_string())?;
    let secs = seconds(&b.out, "pretrain");
    let gap = f.ceiling - f.accuracy;
    ensure(
        f.excess() <= 0.05 && gap.abs() <= 0.05 && secs <= 600.0,
        format!(
            "expected NLL {:.4} vs oracle entropy {:.4} (excess {:.4}, empirical NLL {:.4}); top-1 {:.4} vs ceiling {:.4}; {} steps; {secs:.0}s",
            f.expected_nll, f.entropy, f.excess(), f.nll, f.accuracy, f.ceiling, f.steps
        ),
    )
}

fn tabular_chain() -> Result<(usize, usize), String> {
    let links =
        Network::Links(LinkGraph::new(vec![vec![0, 1, 2, 3]; 4]).map_err(|e| e.to_string())?);
    let traj = Trajectory {
        traj_id: 0,
        user_id: 0,
        depart_bin: 0,
        speed_bin: 0,
        positions: vec![0, 1, 2, 3],
        actions: (1..4).map(|a| ActionId::new(a).unwrap()).collect(),
        destination: 3,
        status: Status::Complete,
    };
    let ts = transitions(&traj);
    let vocab = VocabSpec::for_network(&links, 1, 32, false).map_err(|e| e.to_string())?;
    let mut m = CriticModel::new(
        CriticConfig {
            d: 8,
            ..CriticConfig::default()
        },
        vocab,
        3,
    )
    .map_err(|e| e.to_string())?;
    let cfg = IrlConfig {
        lr: 0.01,
        epochs: 400,
        ..IrlConfig::default()
    };
    train_on_transitions(&ts, &links, &mut m, &cfg, 0).map_err(|e| e.to_string())?;
    let mut ok = 0;
    for t in &ts {
        let p = critic_policy(&t.state, &m, &links).map_err(|e| e.to_string())?;
        let best = (0..NUM_ACTIONS)
            .max_by(|&a, &c| p[a].total_cmp(&p[c]))
            .unwrap();
        ok += (best == t.action.index()) as usize;
    }
    Ok((ok, ts.len()))
}

fn irl_recovery(b: &Bench) -> Check {
    let (critic, _) =
        CriticModel::load(&b.out.join("critic.ckpt"), None).map_err(|e| e.to_string())?;
    let (mut agree, mut total) = (0usize, 0usize);
    let mut states: Vec<EnvState> = Vec::new();
    for tr in &b.data.trajectories {
        let th = b.theta.user(tr.user_id).map_err(|e| e.to_string())?;
        let mut prev = None;
        for t in transitions(tr) {
            let best = oracle_argmax(
                &oracle_action_probs(&b.net, &t.state, prev, th).map_err(|e| e.to_string())?,
            );
            let q = critic_policy(&t.state, &critic, &b.net).map_err(|e| e.to_string())?;
            let a = (0..NUM_ACTIONS)
                .max_by(|&x, &y| q[x].total_cmp(&q[y]).then(y.cmp(&x)))
                .unwrap();
            agree += best.iter().any(|o| o.index() == a) as usize;
            total += 1;
            if states.len() < 200 {
                states.push(t.state);
            }
            prev = Some(t.action);
        }
    }
    let rate = agree as f64 / total as f64;
    let (chain_ok, chain_n) = tabular_chain()?;

    let mut zeroed = critic.clone();
    zeroed.zero_pve();
    let users = b.data.users;
    let mut invariant = true;
    for s in &states {
        let q0 = zeroed
            .q_values(&EnvState { user_id: 0, ..*s })
            .map_err(|e| e.to_string())?;
        for u in 1..users {
            invariant &= zeroed
                .q_values(&EnvState { user_id: u, ..*s })
                .map_err(|e| e.to_string())?
                == q0;
        }
    }
    ensure(
        rate >= 0.9 && chain_ok == chain_n && invariant,
        format!(
            "argmax agreement {rate:.4} ({agree}/{total}); tabular chain {chain_ok}/{chain_n}; zeroed W_pve user-invariant on {} states × {users} users: {invariant}",
            states.len()
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn rmft_improvement(b: &Bench, pretrained: &Path) -> Check {
    let rows = csv_rows(
        &b.out.join("finetune_log.csv"),
        "iter,mean_reward,nll,kl,arrival_rate",
    )?;
    let reward: Vec<f64> = rows
        .iter()
        .map(|r| r[1].parse().unwrap_or(f64::NAN))
        .collect();
    if reward.len() != 30 {
        return Err(format!(
            "{} fine-tuning iterations, expected 30",
            reward.len()
        ));
    }
    let (first, last) = (mean(&reward[..5]), mean(&reward[25..]));

    let eval_eps = encode_all(b.data.eval()).map_err(|e| e.to_string())?;
    let nll_pre = eval_policy(&eval_eps, &b.policy("policy.ckpt")?, &b.net)
        .map_err(|e| e.to_string())?
        .0;
    let nll_ft = eval_policy(&eval_eps, &b.policy("policy_ft.ckpt")?, &b.net)
        .map_err(|e| e.to_string())?
        .0;

    let ft = metrics(&b.out)?["l_jsd"].as_f64().unwrap_or(f64::NAN);
    let pre = metrics(pretrained)?["l_jsd"].as_f64().unwrap_or(f64::NAN);

    // Two disjoint samples from the same oracle configuration.
    let mut sc = b
        .cfg
        .data
        .synthetic
        .clone()
        .ok_or("benchmark has no synthetic section")?;
    sc.trajectories *= 2;
    let (both, _) = gen_dataset(&b.net, &sc, b.cfg.seed).map_err(|e| e.to_string())?;
    let (x, y): (Vec<_>, Vec<_>) = both
        .trajectories
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % 2 == 0);
    let x: Vec<Trajectory> = x.into_iter().map(|p| p.1).collect();
    let y: Vec<Trajectory> = y.into_iter().map(|p| p.1).collect();
    let floor = evaluate(&x, &y, Pairing::default()).map_err(|e| e.to_string())?;
    let secs = seconds(&b.out, "finetune");
    ensure(
        last > first
            && nll_ft - nll_pre <= 0.1
            && ft <= pre + 0.01
            && ft <= 0.05
            && floor.l_jsd <= 0.05
            && floor.c_jsd <= 0.05
            && secs <= 1200.0,
        format!(
            "reward first-5 {first:.4} → last-5 {last:.4}; held-out NLL {nll_pre:.4} → {nll_ft:.4}; L-JSD fine-tuned {ft:.4} vs pretrained {pre:.4}; oracle resample ({} vs {}) L-JSD {:.4} C-JSD {:.4}; {secs:.0}s",
            x.len(),
            y.len(),
            floor.l_jsd,
            floor.c_jsd
        ),
    )
}

fn validity_and_determinism(b: &Bench, pretrained: &Path) -> Check {
    let mut checked = 0;
    let mut complete = 0;
    let mut arrivals = Vec::new();
    for dir in [b.out.as_path(), pretrained] {
        let corpus = Dataset::load(&dir.join("generated.txt"), None).map_err(|e| e.to_string())?;
        for t in &corpus.trajectories {
            t.validate(&b.net)
                .map_err(|e| format!("infeasible generated trajectory: {e}"))?;
            checked += t.actions.len();
            if t.num_steps() > b.cfg.eval.max_len {
                return Err(format!("trajectory {} longer than max_len", t.traj_id));
            }
        }
        let c = corpus
            .trajectories
            .iter()
            .filter(|t| t.is_complete())
            .count();
        complete += c;
        arrivals.push(c as f64 / corpus.len().max(1) as f64);
    }
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let again = dir.path().join("run");
    run_chain(&again)?;
    let mut compared = 0;
    let mut differ = Vec::new();
    let mut names: BTreeSet<String> = BTreeSet::new();
    for d in [&b.out, &again] {
        for e in fs::read_dir(d).map_err(|e| e.to_string())? {
            names.insert(
                e.map_err(|e| e.to_string())?
                    .file_name()
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    for name in &names {
        if name.starts_with("timing_") || name == "bench.json" || name == "manifest_bench.json" {
            continue;
        }
        compared += 1;
        if fs::read(b.out.join(name)).ok() != fs::read(again.join(name)).ok() {
            differ.push(name.clone());
        }
    }
    let min_arrival = arrivals.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(
        min_arrival >= 0.95 && differ.is_empty(),
        format!(
            "{checked} generated actions feasible; arrival within {} steps {:.4} fine-tuned, {:.4} pretrained ({complete} complete); {compared} files byte-identical on rerun{}",
            b.cfg.eval.max_len,
            arrivals[0],
            arrivals[1],
            if differ.is_empty() { String::new() } else { format!(", differing: {differ:?}") }
        ),
    )
}

fn interpretability(b: &Bench) -> Check {
    let profile = csv_rows(
        &b.out.join("attention_profile.csv"),
        "label,mean_score,count",
    )?;
    let combos = csv_rows(&b.out.join("token_combinations.csv"), "combo,count")?;
    let proj = csv_rows(&b.out.join("user_projection.csv"), "user_id,x,y,label")?;
    if profile.is_empty() || combos.is_empty() {
        return Err("empty attention profile or combination table".into());
    }
    for r in &profile {
        let s: f64 = r[1].parse().map_err(|_| format!("bad score {:?}", r))?;
        if !(0.0..=1.0).contains(&s) || r[2].parse::<usize>().is_err() {
            return Err(format!("bad profile row {r:?}"));
        }
    }
    for r in &combos {
        if r[0].split('|').count() != 3 || r[1].parse::<usize>().is_err() {
            return Err(format!("bad combination row {r:?}"));
        }
    }

    // Recount from attention rows of the checkpoint `analyze` used.
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(b.out.join("manifest_analyze.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let ckpt = manifest["notes"]["checkpoint"]
        .as_str()
        .unwrap_or("policy_ft.ckpt")
        .to_string();
    let model = b.policy(&ckpt)?;
    let eps = encode_all(b.data.eval()).map_err(|e| e.to_string())?;
    let rows = attention_rows(&model, &eps, &b.net).map_err(|e| e.to_string())?;
    let worst_norm = rows
        .iter()
        .map(|r| (r.scores.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let expected: usize = rows.iter().map(|r| r.labels.len().saturating_sub(2)).sum();
    let counted: usize = rows.iter().map(|r| combinations_of(r).len()).sum();
    let recorded = manifest["notes"]["combinations"]
        .as_u64()
        .unwrap_or(u64::MAX) as usize;

    let mut points = Vec::new();
    let mut truth = Vec::new();
    for r in &proj {
        let u: usize = r[0]
            .parse()
            .map_err(|_| format!("bad user id {:?}", r[0]))?;
        let x: f64 = r[1].parse().map_err(|_| format!("bad x {:?}", r[1]))?;
        let y: f64 = r[2].parse().map_err(|_| format!("bad y {:?}", r[2]))?;
        points.push([x, y]);
        truth.push(archetype_of(u, 2));
    }
    if points.len() != b.data.users {
        return Err(format!(
            "{} projected users, expected {}",
            points.len(),
            b.data.users
        ));
    }
    let acc = cluster_accuracy(&two_means(&points), &truth);
    ensure(
        expected == counted && counted == recorded && worst_norm <= 1e-9 && acc >= 0.8,
        format!(
            "{} profile rows, {} combination rows, {} users projected; combinations {recorded} = Σ(labels − 2) = {expected} over {} positions; attention rows sum to 1 within {worst_norm:.1e}; 2-means archetype accuracy {acc:.2}",
            profile.len(),
            combos.len(),
            points.len(),
            rows.len()
        ),
    )
}

fn random_corpus(rng: &mut impl Rng) -> Vec<Trajectory> {
    let n = rng.gen_range(1..30);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..10);
            let positions: Vec<usize> = (0..len).map(|_| rng.gen_range(0..15)).collect();
            let mut t = path(&positions, rng.gen_range(0..4));
            t.traj_id = i;
            t.user_id = rng.gen_range(0..3);
            t
        })
        .collect()
}

fn self_comparison() -> Check {
    let mut rng = rng_for(99, 0);
    for trial in 0..100 {
        let c = random_corpus(&mut rng);
        let r = evaluate(&c, &c, Pairing::default()).map_err(|e| e.to_string())?;
        let ok = r.jac == Some(1.0)
            && r.cos == Some(1.0)
            && r.bleu == Some(1.0)
            && r.l_jsd == 0.0
            && r.c_jsd == 0.0;
        if !ok {
            return Err(format!("trial {trial}: {r:?}"));
        }
    }
    Ok("100 random corpora: jac = cos = bleu = 1, L-JSD = C-JSD = 0 exactly".into())
}

fn main() {
    let mut results: Vec<(u32, &str, Check)> = Vec::new();
    let mut report = |n: u32, name: &'static str, c: Check| {
        match &c {
            Ok(m) => println!("PASS criterion {n} ({name}): {m}"),
            Err(m) => println!("FAIL criterion {n} ({name}): {m}"),
        }
        results.push((n, name, c));
    };
    report(1, "gradient integrity", gradient_integrity());
    report(2, "metric oracles", metric_oracles());
    report(3, "GAE exactness", gae_exactness());
    report(9, "self-comparison fixed point", self_comparison());

    match Bench::new() {
        Err(e) => {
            for (n, name) in [
                (4, "pretraining fidelity"),
                (5, "IRL recovery"),
                (6, "RMFT improvement"),
                (7, "validity and determinism"),
                (8, "interpretability"),
            ] {
                report(n, name, Err(format!("benchmark pipeline failed: {e}")));
            }
        }
        Ok(b) => {
            println!("benchmark pipeline: {:.0}s", b.chain_seconds);
            let pretrained = b.out.with_file_name("pretrained");
            let side = copy_dir(&b.out, &pretrained)
                .and_then(|_| trajforge(&pretrained, &["generate", "--checkpoint", "policy.ckpt"]))
                .and_then(|_| trajforge(&pretrained, &["eval"]));
            report(4, "pretraining fidelity", pretraining_fidelity(&b));
            report(5, "IRL recovery", irl_recovery(&b));
            match side {
                Ok(()) => {
                    report(6, "RMFT improvement", rmft_improvement(&b, &pretrained));
                    report(
                        7,
                        "validity and determinism",
                        validity_and_determinism(&b, &pretrained),
                    );
                }
                Err(e) => {
                    report(
                        6,
                        "RMFT improvement",
                        Err(format!("pretrained corpus: {e}")),
                    );
                    report(
                        7,
                        "validity and determinism",
                        Err(format!("pretrained corpus: {e}")),
                    );
                }
            }
            report(8, "interpretability", interpretability(&b));
        }
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn copy_dir(from: &Path, to: &Path) -> Result<(), String> {
    fs::create_dir_all(to).map_err(|e| e.to_string())?;
    for e in fs::read_dir(from).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        fs::copy(e.path(), to.join(e.file_name())).map_err(|e| e.to_string())?;
    }
    Ok(())
}
