//! Road environments: a 9-move grid and a link graph with ordered downstream lists.
//!
//! Grid actions map to shifts by `k = (dy + 1)·3 + (dx + 1)`, so action 4 is
//! "stay", 0 is (−1, −1) and 8 is (+1, +1). Rows grow with `dy`, columns with
//! `dx`, and `cell = row·width + col`. Link-graph actions are zero-based
//! indices into the link's downstream list.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 9;

/// Position id: a grid cell index or a link id.
pub type Position = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionId(u8);

impl ActionId {
    pub const STAY: ActionId = ActionId(4);

    pub fn new(v: usize) -> Result<Self> {
        if v < NUM_ACTIONS {
            Ok(ActionId(v as u8))
        } else {
            Err(Error::Index {
                what: "action",
                index: v,
                size: NUM_ACTIONS,
            })
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Grid shift `(dx, dy)` induced by this action.
    pub fn shift(self) -> (i64, i64) {
        (self.0 as i64 % 3 - 1, self.0 as i64 / 3 - 1)
    }

    pub fn from_shift(dx: i64, dy: i64) -> Option<Self> {
        if (-1..=1).contains(&dx) && (-1..=1).contains(&dy) {
            Some(ActionId(((dy + 1) * 3 + (dx + 1)) as u8))
        } else {
            None
        }
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_cell_size")]
    pub cell_size_m: f64,
}

fn default_cell_size() -> f64 {
    1000.0
}

impl GridSpec {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        let g = Self {
            width,
            height,
            cell_size_m: default_cell_size(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2×2, got {}×{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, row: usize, col: usize) -> Position {
        row * self.width + col
    }

    /// `(row, col)` of a cell.
    pub fn coords(&self, cell: Position) -> (usize, usize) {
        (cell / self.width, cell % self.width)
    }

    pub fn apply_action(&self, cell: Position, a: ActionId) -> Result<Position> {
        if cell >= self.num_cells() {
            return Err(Error::Index {
                what: "cell",
                index: cell,
                size: self.num_cells(),
            });
        }
        let (row, col) = self.coords(cell);
        let (dx, dy) = a.shift();
        let (r, c) = (row as i64 + dy, col as i64 + dx);
        if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
            return Err(Error::Boundary {
                cell,
                action: a.index(),
            });
        }
        Ok(self.cell(r as usize, c as usize))
    }

    /// Inverse of [`apply_action`](Self::apply_action); `None` when the cells are not 3×3 neighbours.
    pub fn action_between(&self, from: Position, to: Position) -> Option<ActionId> {
        let (r0, c0) = self.coords(from);
        let (r1, c1) = self.coords(to);
        ActionId::from_shift(c1 as i64 - c0 as i64, r1 as i64 - r0 as i64)
    }

    /// Chebyshev distance, which is the hop count under 8-neighbour moves.
    pub fn chebyshev(&self, a: Position, b: Position) -> usize {
        let (r0, c0) = self.coords(a);
        let (r1, c1) = self.coords(b);
        r0.abs_diff(r1).max(c0.abs_diff(c1))
    }
}

/// Directed link graph. Adjacency order defines action semantics and is persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGraph {
    downstream: Vec<Vec<Position>>,
    coords: Vec<Option<(f64, f64)>>,
}

impl LinkGraph {
    pub fn new(downstream: Vec<Vec<Position>>) -> Result<Self> {
        let n = downstream.len();
        for (l, adj) in downstream.iter().enumerate() {
            if adj.len() > NUM_ACTIONS {
                return Err(Error::Config(format!(
                    "link {l} has out-degree {} > 9",
                    adj.len()
                )));
            }
            if let Some(&bad) = adj.iter().find(|&&d| d >= n) {
                return Err(Error::Index {
                    what: "downstream link",
                    index: bad,
                    size: n,
                });
            }
        }
        Ok(Self {
            coords: vec![None; n],
            downstream,
        })
    }

    pub fn num_links(&self) -> usize {
        self.downstream.len()
    }

    pub fn downstream(&self, link: Position) -> &[Position] {
        &self.downstream[link]
    }

    pub fn coords(&self, link: Position) -> Option<(f64, f64)> {
        self.coords.get(link).copied().flatten()
    }

    pub fn action_index_of(&self, link: Position, next: Position) -> Result<ActionId> {
        let adj = self.downstream.get(link).ok_or(Error::Index {
            what: "link",
            index: link,
            size: self.downstream.len(),
        })?;
        adj.iter()
            .position(|&d| d == next)
            .map(|i| ActionId(i as u8))
            .ok_or(Error::Connectivity {
                from: link,
                to: next,
            })
    }

    /// Parse `link_id: down_1,down_2,...` lines plus optional `# coords link_id lon lat`.
    /// Link ids are dense integers; the graph has `max id + 1` links.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut coords: Vec<(usize, f64, f64)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let loc = || format!("link graph line {}", ln + 1);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.first() == Some(&"coords") {
                    if parts.len() != 4 {
                        return Err(Error::parse(loc(), "expected `# coords link_id lon lat`"));
                    }
                    let id = parts[1]
                        .parse()
                        .map_err(|_| Error::parse(loc(), "bad link id"))?;
                    let lon = parts[2]
                        .parse()
                        .map_err(|_| Error::parse(loc(), "bad lon"))?;
                    let lat = parts[3]
                        .parse()
                        .map_err(|_| Error::parse(loc(), "bad lat"))?;
                    coords.push((id, lon, lat));
                }
                continue;
            }
            let (id, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::parse(loc(), "missing ':'"))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::parse(loc(), "bad link id"))?;
            let adj = rest
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::parse(loc(), format!("bad downstream id {s:?}")))
                })
                .collect::<Result<Vec<usize>>>()?;
            entries.push((id, adj));
        }
        let n = entries
            .iter()
            .flat_map(|(id, adj)| std::iter::once(*id).chain(adj.iter().copied()))
            .chain(coords.iter().map(|c| c.0))
            .max()
            .map_or(0, |m| m + 1);
        let mut downstream = vec![Vec::new(); n];
        for (id, adj) in entries {
            downstream[id] = adj;
        }
        let mut g = Self::new(downstream)?;
        for (id, lon, lat) in coords {
            g.coords[id] = Some((lon, lat));
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, adj) in self.downstream.iter().enumerate() {
            let list: Vec<String> = adj.iter().map(ToString::to_string).collect();
            s.push_str(&format!("{l}: {}\n", list.join(",")));
        }
        for (l, c) in self.coords.iter().enumerate() {
            if let Some((lon, lat)) = c {
                s.push_str(&format!("# coords {l} {lon} {lat}\n"));
            }
        }
        s
    }
}

/// The environment a trajectory lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Network {
    Grid(GridSpec),
    Links(LinkGraph),
}

impl Network {
    pub fn num_positions(&self) -> usize {
        match self {
            Network::Grid(g) => g.num_cells(),
            Network::Links(l) => l.num_links(),
        }
    }

    pub fn check_position(&self, p: Position) -> Result<()> {
        if p < self.num_positions() {
            Ok(())
        } else {
            Err(Error::Index {
                what: "position",
                index: p,
                size: self.num_positions(),
            })
        }
    }

    pub fn step(&self, p: Position, a: ActionId) -> Result<Position> {
        match self {
            Network::Grid(g) => g.apply_action(p, a),
            Network::Links(l) => {
                self.check_position(p)?;
                l.downstream(p)
                    .get(a.index())
                    .copied()
                    .ok_or(Error::Boundary {
                        cell: p,
                        action: a.index(),
                    })
            }
        }
    }

    /// Action leading from `from` to `to` in one move.
    pub fn action_between(&self, from: Position, to: Position) -> Result<ActionId> {
        match self {
            Network::Grid(g) => g
                .action_between(from, to)
                .ok_or(Error::Connectivity { from, to }),
            Network::Links(l) => l.action_index_of(from, to),
        }
    }

    pub fn feasible_mask(&self, p: Position) -> [bool; NUM_ACTIONS] {
        let mut m = [false; NUM_ACTIONS];
        match self {
            Network::Grid(g) => {
                for (k, slot) in m.iter_mut().enumerate() {
                    *slot = g.apply_action(p, ActionId(k as u8)).is_ok();
                }
            }
            Network::Links(l) => {
                for slot in m.iter_mut().take(l.downstream(p).len()) {
                    *slot = true;
                }
            }
        }
        m
    }

    pub fn feasible_actions(&self, p: Position) -> Vec<ActionId> {
        self.feasible_mask(p)
            .iter()
            .enumerate()
            .filter(|(_, &ok)| ok)
            .map(|(k, _)| ActionId(k as u8))
            .collect()
    }

    /// Breadth-first hop count from `a` to `b`; `None` when unreachable.
    pub fn shortest_hops(&self, a: Position, b: Position) -> Option<usize> {
        match self {
            Network::Grid(g) => Some(g.chebyshev(a, b)),
            Network::Links(_) => bfs_hops(self, a, b),
        }
    }

    /// Hop count from every position to `dest`.
    pub fn distances_to(&self, dest: Position) -> Vec<Option<usize>> {
        match self {
            Network::Grid(g) => (0..g.num_cells())
                .map(|p| Some(g.chebyshev(p, dest)))
                .collect(),
            Network::Links(l) => {
                let n = l.num_links();
                let mut upstream = vec![Vec::new(); n];
                for (u, adj) in l.downstream.iter().enumerate() {
                    for &d in adj {
                        upstream[d].push(u);
                    }
                }
                let mut dist = vec![None; n];
                let mut queue = VecDeque::from([dest]);
                dist[dest] = Some(0);
                while let Some(x) = queue.pop_front() {
                    let dx = dist[x].unwrap();
                    for &u in &upstream[x] {
                        if dist[u].is_none() {
                            dist[u] = Some(dx + 1);
                            queue.push_back(u);
                        }
                    }
                }
                dist
            }
        }
    }
}

/// Plain BFS over feasible moves, for any network.
pub fn bfs_hops(net: &Network, a: Position, b: Position) -> Option<usize> {
    let n = net.num_positions();
    let mut dist = vec![usize::MAX; n];
    dist[a] = 0;
    let mut queue = VecDeque::from([a]);
    while let Some(x) = queue.pop_front() {
        if x == b {
            return Some(dist[x]);
        }
        for act in net.feasible_actions(x) {
            let y = net.step(x, act).expect("feasible");
            if dist[y] == usize::MAX {
                dist[y] = dist[x] + 1;
                queue.push_back(y);
            }
        }
    }
    None
}

/// A decision context. Departure and speed bins stay fixed for the whole episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub position: Position,
    pub origin: Position,
    pub destination: Position,
    pub depart_bin: usize,
    pub speed_bin: usize,
    pub user_id: usize,
}

impl EnvState {
    pub fn at(&self, position: Position) -> Self {
        Self { position, ..*self }
    }

    pub fn arrived(&self) -> bool {
        self.position == self.destination
    }
}
