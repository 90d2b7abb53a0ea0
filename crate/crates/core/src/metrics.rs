//! Corpus comparison: pairwise similarity (Jaccard, cosine, BLEU), pooled
//! distribution divergence (link and connection JSD) and n-gram entropies.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgrid::Position;
use crate::par;
use crate::synthgen::Trajectory;

pub const BLEU_ORDER: usize = 4;
pub const BLEU_EPS: f64 = 1e-9;
const NORM_TOL: f64 = 1e-9;

fn non_empty(a: &[Position], b: &[Position]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("empty position sequence".into()));
    }
    Ok(())
}

pub fn jaccard(a: &[Position], b: &[Position]) -> Result<f64> {
    non_empty(a, b)?;
    let sa: BTreeSet<_> = a.iter().collect();
    let sb: BTreeSet<_> = b.iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    Ok(inter as f64 / union as f64)
}

fn counts<T: Ord + Clone>(xs: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Cosine of the position-count vectors.
pub fn cosine(a: &[Position], b: &[Position]) -> Result<f64> {
    non_empty(a, b)?;
    if a == b {
        return Ok(1.0);
    }
    let ca = counts(a.iter().copied());
    let cb = counts(b.iter().copied());
    let dot: f64 = ca
        .iter()
        .filter_map(|(k, &x)| cb.get(k).map(|&y| (x * y) as f64))
        .sum();
    let na: f64 = ca.values().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
    let nb: f64 = cb.values().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
    Ok((dot / (na * nb)).min(1.0))
}

fn ngrams(s: &[Position], n: usize) -> BTreeMap<&[Position], usize> {
    counts(s.windows(n))
}

/// Sentence BLEU against one reference.
pub fn bleu(candidate: &[Position], reference: &[Position], k: usize) -> Result<f64> {
    bleu_multi(candidate, &[reference], k)
}

/// BLEU with clipped counts taken against the best reference per n-gram and
/// the brevity penalty against the reference length closest to the candidate.
pub fn bleu_multi(candidate: &[Position], references: &[&[Position]], k: usize) -> Result<f64> {
    if candidate.is_empty() || references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::Argument(
            "BLEU needs a non-empty candidate and references".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Argument("BLEU order must be positive".into()));
    }
    let c = candidate.len();
    let order = k.min(c);
    let mut log_p = 0.0;
    for n in 1..=order {
        let cand = ngrams(candidate, n);
        let refs: Vec<_> = references.iter().map(|r| ngrams(r, n)).collect();
        let matched: usize = cand
            .iter()
            .map(|(g, &cnt)| {
                cnt.min(
                    refs.iter()
                        .map(|r| r.get(g).copied().unwrap_or(0))
                        .max()
                        .unwrap_or(0),
                )
            })
            .sum();
        let total = c + 1 - n;
        let p = if matched == 0 {
            BLEU_EPS
        } else {
            matched as f64 / total as f64
        };
        log_p += p.ln() / order as f64;
    }
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap();
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * log_p.exp())
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > NORM_TOL {
        return Err(Error::Argument(format!(
            "{name} is not a probability distribution (sum {s})"
        )));
    }
    Ok(())
}

fn kl_to_mid(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (2.0 * p / (p + q)).ln()
    }
}

/// Jensen-Shannon divergence in nats over an aligned support.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("jsd", &[p.len()], &[q.len()]));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| 0.5 * (kl_to_mid(a, b) + kl_to_mid(b, a)))
        .collect();
    Ok(sorted_sum(&mut terms).clamp(0.0, std::f64::consts::LN_2))
}

fn sorted_sum(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// JSD between two count histograms over their union support.
pub fn jsd_counts<K: Ord>(a: &BTreeMap<K, usize>, b: &BTreeMap<K, usize>) -> Result<f64> {
    let na: usize = a.values().sum();
    let nb: usize = b.values().sum();
    if na == 0 || nb == 0 {
        return Err(Error::Argument("empty histogram".into()));
    }
    let keys: BTreeSet<&K> = a.keys().chain(b.keys()).collect();
    let p: Vec<f64> = keys
        .iter()
        .map(|k| a.get(*k).copied().unwrap_or(0) as f64 / na as f64)
        .collect();
    let q: Vec<f64> = keys
        .iter()
        .map(|k| b.get(*k).copied().unwrap_or(0) as f64 / nb as f64)
        .collect();
    if p == q {
        return Ok(0.0);
    }
    jsd(&p, &q)
}

fn entropy<K>(c: &BTreeMap<K, usize>, log: fn(f64) -> f64) -> Result<f64> {
    let n: usize = c.values().sum();
    if n == 0 {
        return Err(Error::Argument("entropy of an empty histogram".into()));
    }
    let mut terms: Vec<f64> = c
        .values()
        .map(|&k| {
            let p = k as f64 / n as f64;
            -p * log(p)
        })
        .collect();
    Ok(sorted_sum(&mut terms).max(0.0))
}

pub fn position_counts(corpus: &[Trajectory]) -> BTreeMap<Position, usize> {
    counts(corpus.iter().flat_map(|t| t.positions.iter().copied()))
}

pub fn connection_counts(corpus: &[Trajectory]) -> BTreeMap<(Position, Position), usize> {
    counts(
        corpus
            .iter()
            .flat_map(|t| t.positions.windows(2).map(|w| (w[0], w[1]))),
    )
}

/// Shannon entropy in bits of pooled position occurrences.
pub fn unigram_entropy(corpus: &[Trajectory]) -> Result<f64> {
    entropy(&position_counts(corpus), f64::log2)
}

/// Shannon entropy in bits of pooled consecutive position pairs.
pub fn bigram_entropy(corpus: &[Trajectory]) -> Result<f64> {
    entropy(&connection_counts(corpus), f64::log2)
}

/// Entropy in nats of a user's (upstream, downstream, depart bin) tuples.
pub fn route_choice_entropy(user_trajectories: &[&Trajectory]) -> Result<f64> {
    let c = counts(user_trajectories.iter().flat_map(|t| {
        t.positions
            .windows(2)
            .map(move |w| (w[0], w[1], t.depart_bin))
    }));
    entropy(&c, f64::ln)
}

/// Route-choice entropy per user id, for users with at least one transition.
pub fn route_choice_entropy_by_user(corpus: &[Trajectory]) -> BTreeMap<usize, f64> {
    let mut by_user: BTreeMap<usize, Vec<&Trajectory>> = BTreeMap::new();
    for t in corpus {
        by_user.entry(t.user_id).or_default().push(t);
    }
    by_user
        .into_iter()
        .filter_map(|(u, ts)| route_choice_entropy(&ts).ok().map(|h| (u, h)))
        .collect()
}

/// How a generated trajectory is compared with the references sharing its
/// (origin, destination, depart bin) key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Best Jaccard and cosine over the key's references; BLEU against all of them.
    #[default]
    BestMatch,
    /// Plain average over the key's references.
    MeanOverKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jac: Option<f64>,
    pub cos: Option<f64>,
    pub bleu: Option<f64>,
    pub l_jsd: f64,
    pub c_jsd: f64,
    pub ue: f64,
    pub be: f64,
    pub generated: usize,
    pub reference: usize,
    pub paired: usize,
    pub unpaired: usize,
    pub pairing: Pairing,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "jac,cos,bleu,l_jsd,c_jsd,ue,be,generated,reference,paired,unpaired";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{}\n{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
            Self::CSV_HEADER,
            opt(self.jac),
            opt(self.cos),
            opt(self.bleu),
            self.l_jsd,
            self.c_jsd,
            self.ue,
            self.be,
            self.generated,
            self.reference,
            self.paired,
            self.unpaired
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean_sorted(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(sorted_sum(&mut v) / n)
}

fn pair_scores(g: &[Position], refs: &[&[Position]], pairing: Pairing) -> Result<[f64; 3]> {
    let jac: Vec<f64> = refs.iter().map(|r| jaccard(g, r)).collect::<Result<_>>()?;
    let cos: Vec<f64> = refs.iter().map(|r| cosine(g, r)).collect::<Result<_>>()?;
    Ok(match pairing {
        Pairing::BestMatch => [
            jac.into_iter().fold(0.0, f64::max),
            cos.into_iter().fold(0.0, f64::max),
            bleu_multi(g, refs, BLEU_ORDER)?,
        ],
        Pairing::MeanOverKey => {
            let bl: Vec<f64> = refs
                .iter()
                .map(|r| bleu(g, r, BLEU_ORDER))
                .collect::<Result<_>>()?;
            [
                mean_sorted(jac).unwrap(),
                mean_sorted(cos).unwrap(),
                mean_sorted(bl).unwrap(),
            ]
        }
    })
}

/// Compare a generated corpus with a reference corpus.
pub fn evaluate(
    generated: &[Trajectory],
    reference: &[Trajectory],
    pairing: Pairing,
) -> Result<MetricsReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Argument("both corpora must be non-empty".into()));
    }
    if generated
        .iter()
        .chain(reference)
        .any(|t| t.positions.is_empty())
    {
        return Err(Error::Argument("trajectory without positions".into()));
    }
    let mut by_key: BTreeMap<(Position, Position, usize), Vec<&[Position]>> = BTreeMap::new();
    for r in reference {
        by_key.entry(r.key()).or_default().push(&r.positions);
    }
    for refs in by_key.values_mut() {
        refs.sort();
    }
    let scores = par::try_map(generated, |g| -> Result<Option<[f64; 3]>> {
        match by_key.get(&g.key()) {
            Some(refs) => pair_scores(&g.positions, refs, pairing).map(Some),
            None => Ok(None),
        }
    })?;
    let paired: Vec<[f64; 3]> = scores.into_iter().flatten().collect();
    let column = |i: usize| mean_sorted(paired.iter().map(|s| s[i]).collect());
    let conn_gen = connection_counts(generated);
    let conn_ref = connection_counts(reference);
    let (c_jsd, be) = if conn_gen.is_empty() || conn_ref.is_empty() {
        (0.0, 0.0)
    } else {
        (
            jsd_counts(&conn_gen, &conn_ref)?,
            entropy(&conn_gen, f64::log2)?,
        )
    };
    Ok(MetricsReport {
        jac: column(0),
        cos: column(1),
        bleu: column(2),
        l_jsd: jsd_counts(&position_counts(generated), &position_counts(reference))?,
        c_jsd,
        ue: unigram_entropy(generated)?,
        be,
        generated: generated.len(),
        reference: reference.len(),
        paired: paired.len(),
        unpaired: generated.len() - paired.len(),
        pairing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgrid::ActionId;
    use crate::synthgen::Status;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    fn traj(positions: Vec<usize>, depart: usize) -> Trajectory {
        let n = positions.len().saturating_sub(1);
        Trajectory {
            traj_id: 0,
            user_id: 0,
            depart_bin: depart,
            speed_bin: 0,
            destination: *positions.last().unwrap(),
            positions,
            actions: vec![ActionId::STAY; n],
            status: Status::Complete,
        }
    }

    #[test]
    fn jaccard_examples() {
        close(jaccard(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        close(jaccard(&[1, 2], &[3, 4]).unwrap(), 0.0);
        close(jaccard(&[1, 2, 3], &[2, 3, 4]).unwrap(), 0.5);
        assert!(jaccard(&[], &[1]).is_err());
    }

    #[test]
    fn cosine_examples() {
        close(cosine(&[4, 5, 5], &[4, 5, 5]).unwrap(), 1.0);
        close(cosine(&[1, 2], &[3]).unwrap(), 0.0);
        // counts (1,1,0) vs (1,0,0) over positions {7,8,9}
        close(cosine(&[7, 8], &[7]).unwrap(), 1.0 / 2f64.sqrt());
        assert_eq!(
            cosine(&[1, 2, 2], &[2, 1]).unwrap(),
            cosine(&[2, 1], &[1, 2, 2]).unwrap()
        );
    }

    #[test]
    fn bleu_examples() {
        close(bleu(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5], 4).unwrap(), 1.0);
        close(
            bleu(&[2, 3], &[1, 2, 3, 4], 1).unwrap(),
            (1.0f64 - 2.0).exp(),
        );
        let none = bleu(&[7, 8, 9], &[1, 2, 3], 4).unwrap();
        assert!(none > 0.0 && none < 1e-8);
        assert_eq!(
            bleu_multi(&[1, 2, 3], &[&[9, 9], &[1, 2, 3]], 4).unwrap(),
            1.0
        );
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        close(
            jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            std::f64::consts::LN_2,
        );
        let h = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        let expect =
            0.5 * (2.0f64 / 1.5).ln() + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * 2f64.ln());
        close(h, expect);
        assert!((h - 0.21576).abs() < 1e-5);
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn entropy_examples() {
        close(unigram_entropy(&[traj(vec![3, 3, 3], 0)]).unwrap(), 0.0);
        close(unigram_entropy(&[traj(vec![1, 2], 0)]).unwrap(), 1.0);
        close(
            unigram_entropy(&[traj(vec![1, 2], 0), traj(vec![3, 4], 0)]).unwrap(),
            2.0,
        );
        close(
            bigram_entropy(&[traj(vec![1, 2], 0), traj(vec![1, 2], 0)]).unwrap(),
            0.0,
        );
        close(
            bigram_entropy(&[traj(vec![1, 2], 0), traj(vec![2, 1], 0)]).unwrap(),
            1.0,
        );
        close(bigram_entropy(&[traj(vec![1, 2, 3], 0)]).unwrap(), 1.0);
    }

    #[test]
    fn route_choice_entropy_examples() {
        let a = traj(vec![1, 2], 5);
        close(route_choice_entropy(&[&a, &a]).unwrap(), 0.0);
        let b = traj(vec![1, 2, 3, 4], 5);
        close(route_choice_entropy(&[&b]).unwrap(), 3f64.ln());
        let c = traj(vec![1, 2], 6);
        let d = traj(vec![2, 3], 6);
        let h = route_choice_entropy(&[&a, &a, &c, &d]).unwrap();
        close(h, -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln()));
        assert!((h - 1.03972).abs() < 1e-5);
        assert!(route_choice_entropy(&[&traj(vec![1], 0)]).is_err());
    }

    #[test]
    fn unpaired_trajectories_are_counted_not_scored() {
        let r = evaluate(
            &[traj(vec![1, 2], 0)],
            &[traj(vec![5, 6], 0)],
            Pairing::BestMatch,
        )
        .unwrap();
        assert_eq!((r.jac, r.cos, r.bleu), (None, None, None));
        assert_eq!((r.paired, r.unpaired), (0, 1));
        close(r.l_jsd, std::f64::consts::LN_2);
    }

    #[test]
    fn mean_over_key_averages_references() {
        let g = [traj(vec![1, 2, 3], 0)];
        let refs = [traj(vec![1, 2, 3], 0), traj(vec![1, 4, 3], 0)];
        let best = evaluate(&g, &refs, Pairing::BestMatch).unwrap();
        let mean = evaluate(&g, &refs, Pairing::MeanOverKey).unwrap();
        assert_eq!(best.jac, Some(1.0));
        close(mean.jac.unwrap(), 0.75);
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<Trajectory>> {
        prop::collection::vec(
            (prop::collection::vec(0usize..12, 1..9), 0usize..3).prop_map(|(p, d)| traj(p, d)),
            1..25,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn self_comparison_is_a_fixed_point(c in corpus_strategy()) {
            let r = evaluate(&c, &c, Pairing::BestMatch).unwrap();
            prop_assert_eq!(r.jac, Some(1.0));
            prop_assert_eq!(r.cos, Some(1.0));
            prop_assert_eq!(r.bleu, Some(1.0));
            prop_assert_eq!(r.l_jsd, 0.0);
            prop_assert_eq!(r.c_jsd, 0.0);
            prop_assert_eq!(r.ue, unigram_entropy(&c).unwrap());
        }

        #[test]
        fn reports_ignore_corpus_order(g in corpus_strategy(), r in corpus_strategy(), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let mut g2 = g.clone();
            let mut r2 = r.clone();
            let mut rng = crate::numcore::rng_for(seed, 0);
            g2.shuffle(&mut rng);
            r2.shuffle(&mut rng);
            for pairing in [Pairing::BestMatch, Pairing::MeanOverKey] {
                prop_assert_eq!(evaluate(&g, &r, pairing).unwrap(), evaluate(&g2, &r2, pairing).unwrap());
            }
        }

        #[test]
        fn symmetric_measures(a in prop::collection::vec(0usize..6, 1..8), b in prop::collection::vec(0usize..6, 1..8)) {
            prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
            let ca = counts(a.iter().copied());
            let cb = counts(b.iter().copied());
            let j = jsd_counts(&ca, &cb).unwrap();
            prop_assert_eq!(j, jsd_counts(&cb, &ca).unwrap());
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&j));
        }
    }
}
