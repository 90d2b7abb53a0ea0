//! Trajectory data: the oracle generator, CSV ingestion and the dataset file format.

mod ingest;
mod oracle;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgrid::{ActionId, GridSpec, LinkGraph, Network, Position};
use crate::numcore::rng_for;

pub use ingest::{ingest_csv, ingest_str, ColumnMap, IngestConfig, IngestReport};
pub use oracle::{
    archetype_of, features, gen_dataset, gen_trajectory, oracle_action_probs, oracle_argmax,
    oracle_reference, OracleReference, PreferenceParams, SynthConfig, NUM_FEATURES,
};

pub const DEPART_BINS: usize = 24;
pub const SPEED_BINS: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Complete,
    Truncated,
    /// Stopped at a position with no feasible action.
    DeadEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub traj_id: u64,
    pub user_id: usize,
    pub depart_bin: usize,
    pub speed_bin: usize,
    pub positions: Vec<Position>,
    pub actions: Vec<ActionId>,
    pub destination: Position,
    pub status: Status,
}

impl Trajectory {
    pub fn origin(&self) -> Position {
        self.positions[0]
    }

    pub fn is_complete(&self) -> bool {
        self.status == Status::Complete
    }

    /// Number of decisions, i.e. recorded actions.
    pub fn num_steps(&self) -> usize {
        self.actions.len()
    }

    /// Context key used to pair generated and reference trajectories.
    pub fn key(&self) -> (Position, Position, usize) {
        (self.origin(), self.destination, self.depart_bin)
    }

    /// Connectivity invariant plus the basic shape rules.
    pub fn validate(&self, net: &Network) -> Result<()> {
        let bad = |reason: String| Error::Trajectory {
            id: self.traj_id,
            reason,
        };
        if self.positions.len() < 2 {
            return Err(bad(format!(
                "{} positions, need at least 2",
                self.positions.len()
            )));
        }
        if self.actions.len() + 1 != self.positions.len() {
            return Err(bad(format!(
                "{} actions for {} positions",
                self.actions.len(),
                self.positions.len()
            )));
        }
        if self.speed_bin >= SPEED_BINS {
            return Err(bad(format!("speed bin {} out of range", self.speed_bin)));
        }
        net.check_position(self.destination)?;
        for (t, (&a, w)) in self
            .actions
            .iter()
            .zip(self.positions.windows(2))
            .enumerate()
        {
            net.check_position(w[0])?;
            let next = net
                .step(w[0], a)
                .map_err(|e| bad(format!("step {t}: {e}")))?;
            if next != w[1] {
                return Err(bad(format!(
                    "step {t}: action {a} from {} leads to {next}, recorded {}",
                    w[0], w[1]
                )));
            }
        }
        if self.is_complete() && *self.positions.last().unwrap() != self.destination {
            return Err(bad(
                "complete trajectory does not end at its destination".into()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub network: Network,
    pub users: usize,
    pub trajectories: Vec<Trajectory>,
    pub split: Split,
}

impl Dataset {
    pub fn new(network: Network, users: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        if users == 0 {
            return Err(Error::Config("user count must be at least 1".into()));
        }
        for t in &trajectories {
            if t.user_id >= users {
                return Err(Error::Trajectory {
                    id: t.traj_id,
                    reason: format!("user {} not below user count {users}", t.user_id),
                });
            }
            t.validate(&network)?;
        }
        let split = Split {
            train: (0..trajectories.len()).collect(),
            eval: Vec::new(),
        };
        Ok(Self {
            network,
            users,
            trajectories,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.split.train.iter().map(move |&i| &self.trajectories[i])
    }

    pub fn eval(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.split.eval.iter().map(move |&i| &self.trajectories[i])
    }

    /// Per-user stratified split; `round(n_u · eval_fraction)` of each user's
    /// trajectories go to eval. Deterministic given `seed`.
    pub fn split(mut self, eval_fraction: f64, seed: u64) -> Result<Self> {
        if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "eval fraction {eval_fraction} not in (0, 1)"
            )));
        }
        if self.trajectories.len() < 2 {
            return Err(Error::Argument(format!(
                "cannot split {} trajectories",
                self.trajectories.len()
            )));
        }
        let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.trajectories.iter().enumerate() {
            by_user.entry(t.user_id).or_default().push(i);
        }
        let mut split = Split::default();
        for (user, mut idx) in by_user {
            idx.shuffle(&mut rng_for(seed, user as u64));
            let n_eval = (idx.len() as f64 * eval_fraction).round() as usize;
            split.eval.extend_from_slice(&idx[..n_eval]);
            split.train.extend_from_slice(&idx[n_eval..]);
        }
        split.train.sort_unstable();
        split.eval.sort_unstable();
        self.split = split;
        Ok(self)
    }

    /// Line-oriented text form. The split is not stored; it is recomputed from the seed.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.network {
            Network::Grid(g) => {
                writeln!(s, "#grid {} {} {}", g.width, g.height, g.cell_size_m).unwrap()
            }
            Network::Links(l) => writeln!(s, "#links {}", l.num_links()).unwrap(),
        }
        writeln!(s, "#users {}", self.users).unwrap();
        for t in &self.trajectories {
            s.push_str(&trajectory_line(t));
            s.push('\n');
        }
        s
    }

    /// Parse the text form. Link-graph datasets need the graph supplied.
    pub fn parse(text: &str, links: Option<LinkGraph>) -> Result<Self> {
        let mut network = None;
        let mut users = None;
        let mut trajectories = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let loc = || format!("dataset line {}", ln + 1);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                match parts.as_slice() {
                    ["grid", w, h, c] => {
                        let num = |s: &str| {
                            s.parse::<usize>()
                                .map_err(|_| Error::parse(loc(), "bad grid size"))
                        };
                        let mut g = GridSpec::new(num(w)?, num(h)?)?;
                        g.cell_size_m = c
                            .parse()
                            .map_err(|_| Error::parse(loc(), "bad cell size"))?;
                        network = Some(Network::Grid(g));
                    }
                    ["links", n] => {
                        let g = links.clone().ok_or_else(|| {
                            Error::parse(loc(), "link-graph dataset needs the graph file")
                        })?;
                        if n.parse::<usize>().ok() != Some(g.num_links()) {
                            return Err(Error::parse(
                                loc(),
                                format!("graph has {} links, dataset expects {n}", g.num_links()),
                            ));
                        }
                        network = Some(Network::Links(g));
                    }
                    ["users", u] => {
                        users = Some(
                            u.parse()
                                .map_err(|_| Error::parse(loc(), "bad user count"))?,
                        )
                    }
                    _ => return Err(Error::parse(loc(), format!("unknown header {line:?}"))),
                }
                continue;
            }
            trajectories.push(parse_trajectory_line(line).map_err(|r| Error::parse(loc(), r))?);
        }
        let network = network.ok_or_else(|| Error::parse("dataset", "missing network header"))?;
        let users = users.ok_or_else(|| Error::parse("dataset", "missing #users header"))?;
        Self::new(network, users, trajectories)
    }

    pub fn load(path: &Path, links: Option<LinkGraph>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, links)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn join<T: ToString>(xs: impl Iterator<Item = T>) -> String {
    xs.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn trajectory_line(t: &Trajectory) -> String {
    let flag = match t.status {
        Status::Complete => "C".to_string(),
        Status::Truncated => format!("T@{}", t.destination),
        Status::DeadEnd => format!("D@{}", t.destination),
    };
    format!(
        "{}|{}|{}|{}|{}|{}|{}",
        t.traj_id,
        t.user_id,
        t.depart_bin,
        t.speed_bin,
        join(t.positions.iter()),
        join(t.actions.iter()),
        flag
    )
}

fn parse_trajectory_line(line: &str) -> std::result::Result<Trajectory, String> {
    let f: Vec<&str> = line.split('|').collect();
    if f.len() != 7 {
        return Err(format!("expected 7 '|'-separated fields, got {}", f.len()));
    }
    fn int<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
        s.trim().parse().map_err(|_| format!("bad {what} {s:?}"))
    }
    fn list<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<Vec<T>, String> {
        s.split(',')
            .filter(|x| !x.is_empty())
            .map(|x| int(x, what))
            .collect()
    }
    let positions: Vec<Position> = list(f[4], "position")?;
    let actions = list::<usize>(f[5], "action")?
        .into_iter()
        .map(|a| ActionId::new(a).map_err(|e| e.to_string()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (status, destination) = match f[6] {
        "C" => (
            Status::Complete,
            *positions.last().ok_or("empty position list")?,
        ),
        s => match s.split_once('@') {
            Some(("T", d)) => (Status::Truncated, int(d, "destination")?),
            Some(("D", d)) => (Status::DeadEnd, int(d, "destination")?),
            _ => return Err(format!("bad flag {s:?}")),
        },
    };
    Ok(Trajectory {
        traj_id: int(f[0], "trajectory id")?,
        user_id: int(f[1], "user id")?,
        depart_bin: int(f[2], "departure bin")?,
        speed_bin: int(f[3], "speed bin")?,
        positions,
        actions,
        destination,
        status,
    })
}
