//! Interpretability: attention ranking by relative token label, token
//! combinations, and a 2-D projection of the learned user embeddings.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::route_choice_entropy_by_user;
use crate::netgrid::Network;
use crate::par;
use crate::pretrain::{rows_from, scoring_windows};
use crate::synthgen::Dataset;
use crate::tokenizer::EpisodeTokens;
use crate::trajmodel::PolicyModel;

/// Canonical order is by offset, then S, R, A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    S,
    R,
    A,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenLabel {
    pub offset: usize,
    pub kind: TokenKind,
}

impl fmt::Display for TokenLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}@{}", self.kind, self.offset)
    }
}

/// Attention of one action-generation position over the tokens it can see.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub labels: Vec<TokenLabel>,
    pub scores: Vec<f64>,
}

/// Last-layer, head-averaged attention at every decision position, each
/// decision taken from the first window that contains it.
pub fn attention_rows(
    model: &PolicyModel,
    episodes: &[EpisodeTokens],
    net: &Network,
) -> Result<Vec<AttentionRow>> {
    let k = model.cfg.context;
    let per_episode = par::try_map(episodes, |ep| -> Result<Vec<AttentionRow>> {
        let mut rows = Vec::new();
        for (s, len, first) in scoring_windows(ep.len(), k)? {
            let w = ep.window(s, len);
            let dec = rows_from(&w, net, first);
            if dec.is_empty() {
                continue;
            }
            let out = model.forward(&w)?;
            let last = out
                .attention
                .last()
                .ok_or_else(|| Error::Argument("model has no layers".into()))?;
            for &j in &dec.steps {
                let r = 3 * j + 1;
                let mut scores = vec![0.0; r + 1];
                for head in last {
                    for (c, x) in scores.iter_mut().enumerate() {
                        *x += head.get2(r, c) / last.len() as f64;
                    }
                }
                let labels = (0..=r)
                    .map(|c| TokenLabel {
                        offset: j - c / 3,
                        kind: [TokenKind::R, TokenKind::S, TokenKind::A][c % 3],
                    })
                    .collect();
                rows.push(AttentionRow { labels, scores });
            }
        }
        Ok(rows)
    })?;
    Ok(per_episode.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: TokenLabel,
    pub mean_score: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    /// Sorted by mean score, descending; ties in canonical label order.
    pub ranking: Vec<LabelScore>,
    pub samples: usize,
}

impl AttentionProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,mean_score,count\n");
        for r in &self.ranking {
            s.push_str(&format!("{},{:.9},{}\n", r.label, r.mean_score, r.count));
        }
        s
    }
}

/// Mean score per label over the positions where the label is visible.
pub fn profile_from_rows(rows: &[AttentionRow], top_k: usize) -> AttentionProfile {
    let mut acc: BTreeMap<TokenLabel, (f64, usize)> = BTreeMap::new();
    for row in rows {
        for (l, &x) in row.labels.iter().zip(&row.scores) {
            let e = acc.entry(*l).or_insert((0.0, 0));
            e.0 += x;
            e.1 += 1;
        }
    }
    let mut ranking: Vec<LabelScore> = acc
        .into_iter()
        .map(|(label, (sum, count))| LabelScore {
            label,
            mean_score: sum / count as f64,
            count,
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.mean_score
            .total_cmp(&a.mean_score)
            .then(a.label.cmp(&b.label))
    });
    ranking.truncate(top_k);
    AttentionProfile {
        ranking,
        samples: rows.len(),
    }
}

pub fn attention_profile(
    model: &PolicyModel,
    episodes: &[EpisodeTokens],
    net: &Network,
    top_k: usize,
) -> Result<AttentionProfile> {
    Ok(profile_from_rows(
        &attention_rows(model, episodes, net)?,
        top_k,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationTable {
    /// `(combination, count)`, most frequent first; ties go to the combination
    /// seen highest in an attention ranking.
    pub rows: Vec<(String, usize)>,
    /// Sum of all counts before truncation.
    pub total: usize,
    pub positions: usize,
}

impl CombinationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("combo,count\n");
        for (c, n) in &self.rows {
            s.push_str(&format!("{c},{n}\n"));
        }
        s
    }
}

/// Labels of one row sorted by score (ties canonical), grouped into every run
/// of 3 adjacent labels. Rows with fewer than 3 labels give nothing.
pub fn combinations_of(row: &AttentionRow) -> Vec<String> {
    if row.labels.len() < 3 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..row.labels.len()).collect();
    order.sort_by(|&a, &b| {
        row.scores[b]
            .total_cmp(&row.scores[a])
            .then(row.labels[a].cmp(&row.labels[b]))
    });
    order
        .windows(3)
        .map(|w| {
            format!(
                "{}|{}|{}",
                row.labels[w[0]], row.labels[w[1]], row.labels[w[2]]
            )
        })
        .collect()
}

pub fn combinations_from_rows(rows: &[AttentionRow], top_k: usize) -> CombinationTable {
    // Count and the best (lowest) rank at which the combination was seen.
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut positions = 0;
    for row in rows {
        let combos = combinations_of(row);
        positions += !combos.is_empty() as usize;
        for (rank, c) in combos.into_iter().enumerate() {
            let e = counts.entry(c).or_insert((0, rank));
            e.0 += 1;
            e.1 = e.1.min(rank);
        }
    }
    let total = counts.values().map(|c| c.0).sum();
    let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1 .0
            .cmp(&a.1 .0)
            .then(a.1 .1.cmp(&b.1 .1))
            .then(a.0.cmp(&b.0))
    });
    let rows: Vec<(String, usize)> = ranked
        .into_iter()
        .take(top_k)
        .map(|(c, (n, _))| (c, n))
        .collect();
    CombinationTable {
        rows,
        total,
        positions,
    }
}

pub fn token_combinations(
    model: &PolicyModel,
    episodes: &[EpisodeTokens],
    net: &Network,
    top_k: usize,
) -> Result<CombinationTable> {
    Ok(combinations_from_rows(
        &attention_rows(model, episodes, net)?,
        top_k,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedUser {
    pub user_id: usize,
    pub x: f64,
    pub y: f64,
    /// Route-choice entropy in nats; NaN for users without transitions.
    pub rce: f64,
    pub label: String,
}

pub fn projection_csv(points: &[ProjectedUser]) -> String {
    let mut s = String::from("user_id,x,y,label\n");
    for p in points {
        s.push_str(&format!(
            "{},{:.9},{:.9},{}\n",
            p.user_id, p.x, p.y, p.label
        ));
    }
    s
}

const EIG_TOL: f64 = 1e-12;

/// Rows of `data` projected on the top two principal axes. Each axis is
/// signed so that its first non-zero loading is positive; an axis with no
/// variance is zeroed.
pub fn pca_2d(data: &DMatrix<f64>) -> Result<Vec<[f64; 2]>> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::Argument("PCA needs at least 2 rows".into()));
    }
    let mean = data.row_mean();
    let mut centered = data.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let mut axes = Vec::with_capacity(2);
    for (k, &i) in idx.iter().take(2).enumerate() {
        if eig.eigenvalues[i] <= EIG_TOL * scale {
            if k == 1 {
                log::warn!("degenerate covariance: second projection axis zeroed");
            }
            axes.push(None);
            continue;
        }
        let mut v = eig.eigenvectors.column(i).clone_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        axes.push(Some(v));
    }
    axes.resize(2, None);
    Ok(centered
        .row_iter()
        .map(|r| {
            let mut p = [0.0; 2];
            for (k, a) in axes.iter().enumerate() {
                if let Some(v) = a {
                    p[k] = (r * v)[(0, 0)];
                }
            }
            p
        })
        .collect())
}

/// PCA of the policy's user-embedding rows for the dataset's users, labelled
/// high/low by a median split of route-choice entropy.
pub fn project_user_embeddings(
    model: &PolicyModel,
    dataset: &Dataset,
) -> Result<Vec<ProjectedUser>> {
    let users = dataset.users;
    if users < 2 {
        return Err(Error::Argument("projection needs at least 2 users".into()));
    }
    let table = model.user_embeddings();
    let (rows, d) = table.rows_cols();
    if users > rows {
        return Err(Error::Config(
            "dataset has more users than the model vocabulary".into(),
        ));
    }
    let data = DMatrix::from_row_slice(users, d, &table.data()[..users * d]);
    let points = pca_2d(&data)?;
    let rce = route_choice_entropy_by_user(&dataset.trajectories);
    let mut known: Vec<f64> = rce.values().copied().collect();
    known.sort_by(f64::total_cmp);
    let median = match known.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => known[n / 2],
        n => 0.5 * (known[n / 2 - 1] + known[n / 2]),
    };
    Ok(points
        .into_iter()
        .enumerate()
        .map(|(u, [x, y])| {
            let h = rce.get(&u).copied().unwrap_or(f64::NAN);
            let label = if h.is_nan() {
                "none"
            } else if h > median {
                "high"
            } else {
                "low"
            };
            ProjectedUser {
                user_id: u,
                x,
                y,
                rce: h,
                label: label.to_string(),
            }
        })
        .collect())
}

/// Lloyd's 2-means. Seeds are the point with the smallest first coordinate
/// and the point farthest from it. Returns a cluster id per point.
pub fn two_means(points: &[[f64; 2]]) -> Vec<usize> {
    if points.len() < 2 {
        return vec![0; points.len()];
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let first = (0..points.len())
        .min_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(a.cmp(&b)))
        .unwrap();
    let second = (0..points.len())
        .max_by(|&a, &b| {
            dist(&points[a], &points[first])
                .total_cmp(&dist(&points[b], &points[first]))
                .then(b.cmp(&a))
        })
        .unwrap();
    let mut centers = [points[first], points[second]];
    let mut assign = vec![0; points.len()];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| (dist(p, &centers[1]) < dist(p, &centers[0])) as usize)
            .collect();
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = points
                .iter()
                .zip(&next)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *center = [
                    members.iter().map(|p| p[0]).sum::<f64>() / n,
                    members.iter().map(|p| p[1]).sum::<f64>() / n,
                ];
            }
        }
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

/// Best agreement between two 2-way labelings over both label permutations.
pub fn cluster_accuracy(found: &[usize], truth: &[usize]) -> f64 {
    if found.is_empty() {
        return 0.0;
    }
    let same = found.iter().zip(truth).filter(|(a, b)| a == b).count();
    same.max(found.len() - same) as f64 / found.len() as f64
}
