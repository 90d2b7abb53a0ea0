//! Trajectories to interleaved (return-to-go, state, action) token streams.
//!
//! Step `t` of an episode carries position `t`. Its action is the move taken
//! from there, so the terminal step has no action and gets [`BLANK`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgrid::{ActionId, EnvState, Network, NUM_ACTIONS};
use crate::synthgen::{Status, Trajectory, DEPART_BINS, SPEED_BINS};

/// Action-vocabulary id of the placeholder action.
pub const BLANK: usize = NUM_ACTIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTokens {
    pub rtg: u8,
    pub state: EnvState,
    /// `None` is BLANK.
    pub action: Option<ActionId>,
}

impl StepTokens {
    pub fn action_token(&self) -> usize {
        self.action.map_or(BLANK, ActionId::index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTokens {
    pub traj_id: u64,
    pub status: Status,
    /// Step `t` has timestep `t`.
    pub steps: Vec<StepTokens>,
}

impl EpisodeTokens {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_decisions(&self) -> usize {
        self.steps.iter().filter(|s| s.action.is_some()).count()
    }

    pub fn window(&self, start: usize, len: usize) -> ContextWindow<'_> {
        ContextWindow {
            start,
            steps: &self.steps[start..start + len],
        }
    }
}

/// A contiguous slice of an episode; `start` is the absolute timestep of `steps[0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextWindow<'a> {
    pub start: usize,
    pub steps: &'a [StepTokens],
}

impl ContextWindow<'_> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_decisions(&self) -> usize {
        self.steps.iter().filter(|s| s.action.is_some()).count()
    }
}

pub fn encode_episode(traj: &Trajectory) -> Result<EpisodeTokens> {
    let bad = |reason: &str| Error::Trajectory {
        id: traj.traj_id,
        reason: reason.to_string(),
    };
    if traj.positions.len() < 2 {
        return Err(bad("fewer than 2 positions"));
    }
    if traj.actions.len() + 1 != traj.positions.len() {
        return Err(bad("action count must be position count minus one"));
    }
    let ctx = EnvState {
        position: traj.positions[0],
        origin: traj.positions[0],
        destination: traj.destination,
        depart_bin: traj.depart_bin,
        speed_bin: traj.speed_bin,
        user_id: traj.user_id,
    };
    let steps = traj
        .positions
        .iter()
        .enumerate()
        .map(|(t, &p)| StepTokens {
            rtg: (p != traj.destination) as u8,
            state: ctx.at(p),
            action: traj.actions.get(t).copied(),
        })
        .collect();
    Ok(EpisodeTokens {
        traj_id: traj.traj_id,
        status: traj.status,
        steps,
    })
}

/// Inverse of [`encode_episode`].
pub fn decode(ep: &EpisodeTokens) -> Result<Trajectory> {
    let first = ep.steps.first().ok_or(Error::Trajectory {
        id: ep.traj_id,
        reason: "empty episode".into(),
    })?;
    let n = ep.steps.len();
    let actions = ep.steps[..n - 1]
        .iter()
        .map(|s| {
            s.action.ok_or(Error::Trajectory {
                id: ep.traj_id,
                reason: "BLANK before the terminal step".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        traj_id: ep.traj_id,
        user_id: first.state.user_id,
        depart_bin: first.state.depart_bin,
        speed_bin: first.state.speed_bin,
        positions: ep.steps.iter().map(|s| s.state.position).collect(),
        actions,
        destination: first.state.destination,
        status: ep.status,
    })
}

/// Window starts `0, stride, 2·stride, …` while the window ends before the
/// episode does, then one window right-aligned to the end. A stride above `k`
/// is clamped to `k` so that no step falls between windows.
pub fn window_starts(len: usize, k: usize, stride: usize) -> Result<Vec<usize>> {
    if k == 0 || stride == 0 {
        return Err(Error::Argument(format!(
            "window K={k} and stride={stride} must be positive"
        )));
    }
    if len <= k {
        return Ok(vec![0]);
    }
    let stride = stride.min(k);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|s| s + k < len)
        .collect();
    let last = len - k;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(starts)
}

pub fn windowize(ep: &EpisodeTokens, k: usize, stride: usize) -> Result<Vec<ContextWindow<'_>>> {
    Ok(window_starts(ep.len(), k, stride)?
        .into_iter()
        .map(|s| ep.window(s, k.min(ep.len())))
        .collect())
}

/// Embedding vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub positions: usize,
    pub actions: usize,
    pub rtg: usize,
    pub depart_bins: usize,
    pub speed_bins: usize,
    pub users: usize,
    pub max_timestep: usize,
}

impl VocabSpec {
    /// `pad_positions` rounds the position vocabulary up to a power of two.
    pub fn for_network(
        net: &Network,
        users: usize,
        max_timestep: usize,
        pad_positions: bool,
    ) -> Result<Self> {
        if users == 0 {
            return Err(Error::Config("vocabulary needs at least one user".into()));
        }
        if max_timestep == 0 {
            return Err(Error::Config("max_timestep must be positive".into()));
        }
        let n = net.num_positions();
        Ok(Self {
            positions: if pad_positions {
                n.next_power_of_two()
            } else {
                n
            },
            actions: NUM_ACTIONS + 1,
            rtg: 2,
            depart_bins: DEPART_BINS,
            speed_bins: SPEED_BINS,
            users,
            max_timestep,
        })
    }

    /// Timestep-embedding row; steps past the table share its last row.
    pub fn timestep_index(&self, t: usize) -> usize {
        t.min(self.max_timestep - 1)
    }

    pub fn check_state(&self, s: &EnvState) -> Result<()> {
        let checks = [
            ("position", s.position, self.positions),
            ("origin", s.origin, self.positions),
            ("destination", s.destination, self.positions),
            ("departure bin", s.depart_bin, self.depart_bins),
            ("speed bin", s.speed_bin, self.speed_bins),
            ("user", s.user_id, self.users),
        ];
        for (what, index, size) in checks {
            if index >= size {
                return Err(Error::Index { what, index, size });
            }
        }
        Ok(())
    }
}
