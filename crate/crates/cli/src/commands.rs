use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use trajforge::analysis::{
    attention_rows, combinations_from_rows, profile_from_rows, project_user_embeddings,
    projection_csv,
};
use trajforge::metrics::evaluate;
use trajforge::numcore::derive_seed;
use trajforge::pretrain::{encode_all, pretrain};
use trajforge::rewardirl::{critic_log_csv, train_critic, CriticModel};
use trajforge::rmft::{finetune, ValueModel};
use trajforge::synthgen::{gen_dataset, ingest_csv, Dataset, Trajectory};
use trajforge::tokenizer::VocabSpec;
use trajforge::trajmodel::{contexts_from, generate, generate_corpus, PolicyModel};

use crate::config::{NetworkConfig, ReferenceSplit, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{
    file_hash, manifest_name, timing_name, verify_input, FileHash, Manifest, Timing, CODE_VERSION,
};

pub const DATASET: &str = "dataset.txt";
pub const ORACLE_THETA: &str = "oracle_theta.csv";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const POLICY: &str = "policy.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const CRITIC: &str = "critic.ckpt";
pub const CRITIC_LOG: &str = "critic_log.csv";
pub const POLICY_FT: &str = "policy_ft.ckpt";
pub const VALUE: &str = "value.ckpt";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const GENERATED: &str = "generated.txt";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ATTENTION: &str = "attention_profile.csv";
pub const COMBINATIONS: &str = "token_combinations.csv";
pub const PROJECTION: &str = "user_projection.csv";
pub const BENCH: &str = "bench.json";

const DATA_PRODUCERS: &[&str] = &["synth", "ingest"];
const POLICY_PRODUCERS: &[&str] = &["finetune", "pretrain"];

// Sub-seeds of the run seed, one per stochastic stage.
const MODEL_INIT: u64 = 1;
const PRETRAIN: u64 = 2;
const CRITIC_INIT: u64 = 3;
const IRL: u64 = 4;
const VALUE_INIT: u64 = 5;
const FINETUNE: u64 = 6;
const GENERATE: u64 = 7;
const BENCH_SEED: u64 = 8;

/// One command invocation: resolved config, run directory and the hashes
/// gathered so far.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    command: &'static str,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    notes: Map<String, Value>,
    started: chrono::DateTime<chrono::Utc>,
    clock: Instant,
}

impl Run {
    pub fn new(command: &'static str, cfg: RunConfig, out: PathBuf, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            out,
            seed,
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Map::new(),
            started: chrono::Utc::now(),
            clock: Instant::now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn verified(&mut self, name: &str, producers: &[&str]) -> Result<PathBuf> {
        let h = verify_input(&self.out, name, producers)?;
        self.inputs.push(h);
        Ok(self.path(name))
    }

    /// Record an input that no manifest in the run directory vouches for.
    fn external(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "input {} does not exist",
                path.display()
            )));
        }
        let name = path
            .strip_prefix(&self.out)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| path.display().to_string());
        self.inputs.push(FileHash {
            path: name,
            sha256: file_hash(path)?,
        });
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.path(name), bytes)?;
        self.recorded(name)
    }

    /// Record a file already written under the run directory.
    fn recorded(&mut self, name: &str) -> Result<()> {
        let sha256 = file_hash(&self.path(name))?;
        self.outputs.push(FileHash {
            path: name.to_string(),
            sha256,
        });
        Ok(())
    }

    fn note(&mut self, key: &str, v: impl Into<Value>) {
        self.notes.insert(key.to_string(), v.into());
    }

    fn finish(self) -> Result<Manifest> {
        let m = Manifest {
            command: self.command.to_string(),
            code_version: CODE_VERSION.to_string(),
            config_hash: self.cfg.hash(),
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            notes: self.notes,
        };
        std::fs::write(self.out.join(manifest_name(self.command)), m.to_json())?;
        let t = Timing {
            command: self.command.to_string(),
            started: self.started.to_rfc3339(),
            finished: chrono::Utc::now().to_rfc3339(),
            seconds: self.clock.elapsed().as_secs_f64(),
        };
        std::fs::write(
            self.out.join(timing_name(self.command)),
            serde_json::to_string_pretty(&t).expect("timing serializes") + "\n",
        )?;
        Ok(m)
    }

    fn sub_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, stage)
    }

    fn dataset(&mut self) -> Result<Dataset> {
        let path = self.verified(DATASET, DATA_PRODUCERS)?;
        let ds = Dataset::load(&path, self.cfg.link_graph()?)?;
        Ok(ds.split(self.cfg.data.eval_fraction, self.seed)?)
    }

    fn vocab(&self, ds: &Dataset) -> Result<VocabSpec> {
        let m = &self.cfg.model;
        Ok(VocabSpec::for_network(
            &ds.network,
            ds.users,
            m.max_timestep,
            m.pad_positions,
        )?)
    }

    /// The policy checkpoint named by `choice`, or the newest one in the run.
    fn policy(&mut self, choice: Option<&str>, vocab: &VocabSpec) -> Result<PolicyModel> {
        let name = match choice {
            Some(n) => n.to_string(),
            None if self.path(POLICY_FT).exists() => POLICY_FT.to_string(),
            None => POLICY.to_string(),
        };
        let path = self.verified(&name, POLICY_PRODUCERS)?;
        self.note("checkpoint", name);
        Ok(PolicyModel::load(&path, Some(vocab))?.0)
    }
}

pub fn synth(mut run: Run) -> Result<Manifest> {
    let sc = run
        .cfg
        .data
        .synthetic
        .clone()
        .ok_or_else(|| CliError::Usage("synth needs a data.synthetic section".into()))?;
    let net = run.cfg.network()?;
    let (ds, theta) = gen_dataset(&net, &sc, run.seed)?;
    run.write(DATASET, ds.to_text().as_bytes())?;
    run.write(ORACLE_THETA, theta.to_csv().as_bytes())?;
    run.note("trajectories", ds.len());
    run.note(
        "complete",
        ds.trajectories.iter().filter(|t| t.is_complete()).count(),
    );
    run.finish()
}

pub fn ingest(mut run: Run) -> Result<Manifest> {
    let section = run
        .cfg
        .data
        .ingest
        .clone()
        .ok_or_else(|| CliError::Usage("ingest needs a data.ingest section".into()))?;
    let NetworkConfig::Grid(grid) = run.cfg.network else {
        return Err(CliError::Usage("ingest needs a grid network".into()));
    };
    let csv = run.cfg.resolve(&section.path);
    run.external(&csv)?;
    let (ds, report) = ingest_csv(&csv, grid, &section.params)?;
    run.write(DATASET, ds.to_text().as_bytes())?;
    run.write(
        INGEST_REPORT,
        (serde_json::to_string_pretty(&report).expect("report") + "\n").as_bytes(),
    )?;
    run.note("trajectories", ds.len());
    run.finish()
}

pub fn pretrain_cmd(mut run: Run, resume: bool) -> Result<Manifest> {
    let ds = run.dataset()?;
    let vocab = run.vocab(&ds)?;
    let (mut model, first_epoch, mut log_text) = if resume {
        let path = run.verified(POLICY, &["pretrain"])?;
        let (m, meta) = PolicyModel::load(&path, Some(&vocab))?;
        let epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        let log = std::fs::read_to_string(run.path(PRETRAIN_LOG)).unwrap_or_default();
        (m, epoch, log)
    } else {
        let m = PolicyModel::new(run.cfg.model, vocab, run.sub_seed(MODEL_INIT))?;
        (m, 0, String::new())
    };
    let log = pretrain(
        &ds,
        &mut model,
        &run.cfg.pretrain,
        run.sub_seed(PRETRAIN),
        first_epoch,
    )?;
    let last = log.records.last().map_or(first_epoch, |r| r.epoch);
    let best = log.records.iter().find(|r| Some(r.epoch) == log.best_epoch);
    let meta = json!({
        "epoch": last,
        "best_epoch": log.best_epoch,
        "eval_nll": best.map(|r| r.eval_nll),
    });
    model.save(&run.path(POLICY), meta)?;
    run.recorded(POLICY)?;
    let csv = log.to_csv(false);
    if log_text.is_empty() {
        log_text = csv;
    } else {
        log_text.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
    }
    run.write(PRETRAIN_LOG, log_text.as_bytes())?;
    run.note("first_epoch", first_epoch + 1);
    run.note("last_epoch", last);
    run.note("best_epoch", json!(log.best_epoch));
    if let Some(b) = best {
        run.note("eval_nll", b.eval_nll);
        run.note("eval_acc", b.eval_acc);
    }
    run.finish()
}

pub fn reward(mut run: Run) -> Result<Manifest> {
    let ds = run.dataset()?;
    let vocab = run.vocab(&ds)?;
    let mut critic = CriticModel::new(run.cfg.critic, vocab, run.sub_seed(CRITIC_INIT))?;
    let log = train_critic(&ds, &mut critic, &run.cfg.irl, run.sub_seed(IRL))?;
    let final_loss = log.last().map(|r| r.loss);
    critic.save(
        &run.path(CRITIC),
        json!({ "epochs": log.len(), "loss": final_loss }),
    )?;
    run.recorded(CRITIC)?;
    run.write(CRITIC_LOG, critic_log_csv(&log, false).as_bytes())?;
    run.note("final_loss", json!(final_loss));
    run.finish()
}

pub fn finetune_cmd(mut run: Run) -> Result<Manifest> {
    let ds = run.dataset()?;
    let vocab = run.vocab(&ds)?;
    let policy_path = run.verified(POLICY, &["pretrain"])?;
    let critic_path = run.verified(CRITIC, &["reward"])?;
    let mut policy = PolicyModel::load(&policy_path, Some(&vocab))?.0;
    let critic = CriticModel::load(&critic_path, Some(&vocab))?.0;
    let shared = run.cfg.value.share_critic_embeddings.then_some(&critic);
    let mut value = ValueModel::new(run.cfg.value, vocab, run.sub_seed(VALUE_INIT), shared)?;
    let log = finetune(
        &mut policy,
        &critic,
        &mut value,
        &ds,
        &run.cfg.rmft,
        run.sub_seed(FINETUNE),
    )?;
    let meta = json!({ "iterations": log.records.len() });
    policy.save(&run.path(POLICY_FT), meta.clone())?;
    run.recorded(POLICY_FT)?;
    value.save(&run.path(VALUE), meta)?;
    run.recorded(VALUE)?;
    run.write(FINETUNE_LOG, log.to_csv(false).as_bytes())?;
    let n = log.records.len();
    if n > 0 {
        run.note("first5_reward", log.mean_reward(0..5.min(n)));
        run.note("last5_reward", log.mean_reward(n.saturating_sub(5)..n));
    }
    run.finish()
}

pub fn generate_cmd(mut run: Run, checkpoint: Option<&str>, n: Option<usize>) -> Result<Manifest> {
    let ds = run.dataset()?;
    let vocab = run.vocab(&ds)?;
    let model = run.policy(checkpoint, &vocab)?;
    let pool: Vec<&Trajectory> = ds.eval().collect();
    let e = run.cfg.eval;
    let n = n.unwrap_or(e.trajectories);
    let contexts = contexts_from(&pool, n, e.max_len, e.temperature, run.sub_seed(GENERATE))?;
    let (trajs, failed) = generate_corpus(&contexts, &model, &ds.network);
    let complete = trajs.iter().filter(|t| t.is_complete()).count();
    let written = trajs.len();
    let corpus = Dataset::new(ds.network.clone(), ds.users, trajs)?;
    run.write(GENERATED, corpus.to_text().as_bytes())?;
    run.note("requested", n);
    run.note("written", written);
    run.note("failed", failed);
    run.note("complete", complete);
    run.finish()
}

pub fn eval_cmd(
    mut run: Run,
    generated: Option<&Path>,
    reference: Option<&Path>,
) -> Result<Manifest> {
    let gen_path = generated.map_or_else(|| run.path(GENERATED), Path::to_path_buf);
    let ref_path = reference.map_or_else(|| run.path(DATASET), Path::to_path_buf);
    run.external(&gen_path)?;
    run.external(&ref_path)?;
    let links = run.cfg.link_graph()?;
    let gen = Dataset::load(&gen_path, links.clone())?;
    let reference = Dataset::load(&ref_path, links)?;
    let reference: Vec<Trajectory> = match run.cfg.eval.reference {
        ReferenceSplit::All => reference.trajectories,
        ReferenceSplit::Eval => {
            let r = reference.split(run.cfg.data.eval_fraction, run.seed)?;
            r.eval().cloned().collect()
        }
    };
    if gen.is_empty() {
        return Err(CliError::Usage(format!(
            "generated corpus {} is empty",
            gen_path.display()
        )));
    }
    if reference.is_empty() {
        return Err(CliError::Usage(format!(
            "reference corpus {} is empty",
            ref_path.display()
        )));
    }
    let report = evaluate(&gen.trajectories, &reference, run.cfg.eval.pairing)?;
    run.write(METRICS_JSON, (report.to_json() + "\n").as_bytes())?;
    run.write(METRICS_CSV, report.to_csv().as_bytes())?;
    run.finish()
}

pub fn analyze(mut run: Run, checkpoint: Option<&str>) -> Result<Manifest> {
    let ds = run.dataset()?;
    let vocab = run.vocab(&ds)?;
    let model = run.policy(checkpoint, &vocab)?;
    let episodes = encode_all(ds.eval())?;
    let rows = attention_rows(&model, &episodes, &ds.network)?;
    let k = run.cfg.analysis.top_k;
    let profile = profile_from_rows(&rows, k);
    let combos = combinations_from_rows(&rows, k);
    let points = project_user_embeddings(&model, &ds)?;
    run.write(ATTENTION, profile.to_csv().as_bytes())?;
    run.write(COMBINATIONS, combos.to_csv().as_bytes())?;
    run.write(PROJECTION, projection_csv(&points).as_bytes())?;
    run.note("decisions", rows.len());
    run.note("combinations", combos.total);
    run.finish()
}

pub fn bench(mut run: Run, checkpoint: Option<&str>) -> Result<Manifest> {
    let ds = run.dataset()?;
    let vocab = run.vocab(&ds)?;
    let model = run.policy(checkpoint, &vocab)?;
    let pool: Vec<&Trajectory> = ds.eval().collect();
    let e = run.cfg.eval;
    let contexts = contexts_from(
        &pool,
        run.cfg.bench.trajectories,
        e.max_len,
        e.temperature,
        run.sub_seed(BENCH_SEED),
    )?;
    let mut ms = Vec::with_capacity(contexts.len());
    let mut failed = 0;
    let mut steps = 0;
    for c in &contexts {
        let t0 = Instant::now();
        let r = generate(c, &model, &ds.network);
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        match r {
            Ok(t) => steps += t.num_steps(),
            Err(_) => failed += 1,
        }
    }
    let stats = latency_stats(&ms);
    let report = json!({
        "trajectories": contexts.len(),
        "failed": failed,
        "steps": steps,
        "mean_ms": stats.mean,
        "median_ms": stats.median,
        "p95_ms": stats.p95,
    });
    run.write(
        BENCH,
        (serde_json::to_string_pretty(&report).expect("bench") + "\n").as_bytes(),
    )?;
    run.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Mean, median and nearest-rank 95th percentile.
pub fn latency_stats(samples: &[f64]) -> LatencyStats {
    if samples.is_empty() {
        return LatencyStats {
            mean: f64::NAN,
            median: f64::NAN,
            p95: f64::NAN,
        };
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    LatencyStats {
        mean: s.iter().sum::<f64>() / n as f64,
        median,
        p95: s[rank - 1],
    }
}
