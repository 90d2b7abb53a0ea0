//! Run configuration: one JSON file drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajforge::error::{Error, Result};
use trajforge::metrics::Pairing;
use trajforge::netgrid::{GridSpec, LinkGraph, Network};
use trajforge::pretrain::TrainConfig;
use trajforge::rewardirl::{CriticConfig, IrlConfig};
use trajforge::rmft::{FinetuneConfig, ValueConfig};
use trajforge::synthgen::{IngestConfig, SynthConfig};
use trajforge::trajmodel::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum NetworkConfig {
    Grid(GridSpec),
    /// Path of a link-graph file, relative to the config file.
    Links(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    /// CSV of GPS fixes, relative to the config file.
    pub path: PathBuf,
    pub params: IngestConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default)]
    pub ingest: Option<IngestSection>,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_eval_fraction() -> f64 {
    0.1
}

/// Which trajectories of the reference file `eval` compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSplit {
    #[default]
    Eval,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Trajectories written by `generate` unless `--n` is given.
    pub trajectories: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub pairing: Pairing,
    pub reference: ReferenceSplit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trajectories: 2000,
            temperature: 1.0,
            max_len: 50,
            pairing: Pairing::default(),
            reference: ReferenceSplit::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Attended tokens kept per decision.
    pub top_k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { top_k: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub trajectories: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { trajectories: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub network: NetworkConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub irl: IrlConfig,
    #[serde(default)]
    pub value: ValueConfig,
    #[serde(default)]
    pub rmft: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    /// Directory the config was read from; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Check every section, whichever command will run.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match &self.network {
            NetworkConfig::Grid(g) => {
                GridSpec::new(g.width, g.height)?;
                if !(g.cell_size_m > 0.0 && g.cell_size_m.is_finite()) {
                    return bad("network.grid.cell_size_m must be positive".into());
                }
            }
            NetworkConfig::Links(p) => {
                if p.as_os_str().is_empty() {
                    return bad("network.links must name a file".into());
                }
            }
        }
        match (&self.data.synthetic, &self.data.ingest) {
            (Some(s), None) => s.validate()?,
            (None, Some(i)) => {
                i.params.validate()?;
                if !matches!(self.network, NetworkConfig::Grid(_)) {
                    return bad("data.ingest needs a grid network".into());
                }
            }
            (Some(_), Some(_)) => {
                return bad("data: give either synthetic or ingest, not both".into())
            }
            (None, None) => return bad("data: one of synthetic or ingest is required".into()),
        }
        if !(self.data.eval_fraction > 0.0 && self.data.eval_fraction < 1.0) {
            return bad(format!(
                "data.eval_fraction {} not in (0, 1)",
                self.data.eval_fraction
            ));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.irl.validate()?;
        self.rmft.validate()?;
        if self.critic.d == 0 || self.value.d == 0 {
            return bad("critic.d and value.d must be positive".into());
        }
        if self.value.share_critic_embeddings && self.value.d != self.critic.d {
            return bad("value.share_critic_embeddings needs value.d == critic.d".into());
        }
        if !(self.eval.temperature >= 0.0 && self.eval.temperature.is_finite()) {
            return bad("eval.temperature must be finite and non-negative".into());
        }
        if self.eval.max_len == 0 {
            return bad("eval.max_len must be at least 1".into());
        }
        if self.analysis.top_k == 0 {
            return bad("analysis.top_k must be at least 1".into());
        }
        if self.bench.trajectories == 0 {
            return bad("bench.trajectories must be at least 1".into());
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn link_graph(&self) -> Result<Option<LinkGraph>> {
        match &self.network {
            NetworkConfig::Grid(_) => Ok(None),
            NetworkConfig::Links(p) => LinkGraph::load(&self.resolve(p)).map(Some),
        }
    }

    pub fn network(&self) -> Result<Network> {
        Ok(match &self.network {
            NetworkConfig::Grid(g) => Network::Grid(*g),
            NetworkConfig::Links(_) => Network::Links(self.link_graph()?.expect("link graph")),
        })
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        crate::manifest::sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}
