//! Regularity audits of the weighted bipartite graph between micro-causes
//! and outcome bins, with edge weights `w(x, y) = P(y | x)`.
//!
//! A pair of vertex sets `(A, B)` is `eps`-regular when every `A' ⊆ A`,
//! `B' ⊆ B` with `|A'| > eps |A|` and `|B'| > eps |B|` has weighted density
//! within `eps` of the density of `(A, B)`. The module checks this for
//! given partitions; it does not construct regular partitions.
//!
//! Exact mode enumerates every `A'` and, for each, finds the densest and
//! sparsest `B'` of every admissible size by sorting the column sums, which
//! visits the same extremes as enumerating `B'` outright.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::Partition;
use crate::density::CondDistMatrix;
use crate::error::{Error, Result};
use crate::scm::SyntheticScm;

/// Largest cell the exact search accepts on either side.
pub const EXACT_LIMIT: usize = 14;
pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedBipartiteGraph {
    left: usize,
    right: usize,
    weights: Vec<f64>,
}

impl WeightedBipartiteGraph {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let right = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || right == 0 || rows.iter().any(|r| r.len() != right) {
            return Err(Error::InvalidArgument(
                "weight matrix must be non-empty and rectangular".into(),
            ));
        }
        if rows.iter().flatten().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
        Ok(Self {
            left: rows.len(),
            right,
            weights: rows.concat(),
        })
    }

    pub fn from_cond_dist(p: &CondDistMatrix) -> Self {
        Self {
            left: p.n(),
            right: p.m(),
            weights: p.rows().flatten().copied().collect(),
        }
    }

    /// States of `X` on the left, outcome bins on the right.
    pub fn from_scm(scm: &SyntheticScm) -> Result<Self> {
        let rows = (0..scm.dims().x)
            .map(|x| scm.observational(x))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows)
    }

    pub fn left(&self) -> usize {
        self.left
    }

    pub fn right(&self) -> usize {
        self.right
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights[a * self.right + b]
    }

    pub fn transpose(&self) -> Self {
        let weights = (0..self.right)
            .flat_map(|b| (0..self.left).map(move |a| (a, b)))
            .map(|(a, b)| self.weight(a, b))
            .collect();
        Self {
            left: self.right,
            right: self.left,
            weights,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * c).collect(),
            ..self.clone()
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `w(A, B) / (|A| |B|)`.
    pub fn density(&self, a: &[usize], b: &[usize]) -> f64 {
        let w: f64 = a
            .iter()
            .map(|&i| b.iter().map(|&j| self.weight(i, j)).sum::<f64>())
            .sum();
        w / (a.len() * b.len()) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exact,
    Sampled { samples: usize, seed: u64 },
}

impl SearchMode {
    pub fn sampled(seed: u64) -> Self {
        Self::Sampled {
            samples: DEFAULT_SAMPLES,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Regular,
    Irregular,
    /// Sampling found no violation. This certifies nothing.
    NotRefuted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRegularity {
    pub verdict: Verdict,
    pub worst_deviation: f64,
    /// `None` when no subset pair is admissible.
    pub witness: Option<Witness>,
    pub one_sided: bool,
}

impl PairRegularity {
    pub fn is_regular(&self) -> bool {
        self.verdict == Verdict::Regular
    }
}

fn admissible(size: usize, of: usize, eps: f64) -> bool {
    size as f64 > eps * of as f64
}

fn check_set(set: &[usize], bound: usize, side: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidArgument(format!("{side} vertex set is empty")));
    }
    let mut seen = vec![false; bound];
    for &v in set {
        if v >= bound || std::mem::replace(&mut seen[v], true) {
            return Err(Error::InvalidArgument(format!(
                "{side} vertex set has a bad or repeated vertex {v}"
            )));
        }
    }
    Ok(())
}

/// Densest and sparsest admissible `B'` for one fixed `A'`, given the column
/// sums over `A'` indexed like `b`.
struct Extremes {
    max: (f64, Vec<usize>),
    min: (f64, Vec<usize>),
}

fn extremes(col: &[f64], b: &[usize], a_size: usize, eps: f64) -> Option<Extremes> {
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&i, &j| col[j].total_cmp(&col[i]).then(i.cmp(&j)));
    let mut best: Option<Extremes> = None;
    let (mut top, mut bottom) = (0.0, 0.0);
    for t in 1..=b.len() {
        top += col[order[t - 1]];
        bottom += col[order[b.len() - t]];
        if !admissible(t, b.len(), eps) {
            continue;
        }
        let scale = (a_size * t) as f64;
        let (hi, lo) = (top / scale, bottom / scale);
        let e = best.get_or_insert_with(|| Extremes {
            max: (f64::NEG_INFINITY, Vec::new()),
            min: (f64::INFINITY, Vec::new()),
        });
        if hi > e.max.0 {
            e.max = (hi, order[..t].iter().map(|&i| b[i]).collect());
        }
        if lo < e.min.0 {
            e.min = (lo, order[b.len() - t..].iter().map(|&i| b[i]).collect());
        }
    }
    best
}

fn subset_of(a: &[usize], mask: usize) -> Vec<usize> {
    a.iter()
        .enumerate()
        .filter(|(i, _)| mask >> i & 1 == 1)
        .map(|(_, &v)| v)
        .collect()
}

/// For every admissible `A'`, the densest and sparsest admissible `B'`.
fn for_each_extreme(
    g: &WeightedBipartiteGraph,
    a: &[usize],
    b: &[usize],
    eps: f64,
    mut visit: impl FnMut(Vec<usize>, Extremes),
) {
    for mask in 1usize..1 << a.len() {
        let size = mask.count_ones() as usize;
        if !admissible(size, a.len(), eps) {
            continue;
        }
        let members = subset_of(a, mask);
        let col: Vec<f64> = b
            .iter()
            .map(|&j| members.iter().map(|&i| g.weight(i, j)).sum())
            .collect();
        if let Some(e) = extremes(&col, b, size, eps) {
            visit(members, e);
        }
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn witness_for(g: &WeightedBipartiteGraph, base: f64, left: Vec<usize>, right: Vec<usize>) -> Witness {
    let right = sorted(right);
    let deviation = (g.density(&left, &right) - base).abs();
    Witness { left, right, deviation }
}

/// Checks `eps`-regularity of `(a, b)` with `a` on the left side and `b` on
/// the right. The pair is regular when every admissible subset pair
/// deviates by strictly less than `eps`.
pub fn pair_regularity(
    g: &WeightedBipartiteGraph,
    a: &[usize],
    b: &[usize],
    eps: f64,
    mode: SearchMode,
) -> Result<PairRegularity> {
    check_set(a, g.left, "left")?;
    check_set(b, g.right, "right")?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let base = g.density(a, b);
    let mut worst: Option<Witness> = None;
    let mut consider = |w: Witness| {
        if worst.as_ref().is_none_or(|cur| w.deviation > cur.deviation) {
            worst = Some(w);
        }
    };
    match mode {
        SearchMode::Exact => {
            if a.len().max(b.len()) > EXACT_LIMIT {
                return Err(Error::CellTooLarge {
                    size: a.len().max(b.len()),
                    limit: EXACT_LIMIT,
                });
            }
            for_each_extreme(g, a, b, eps, |left, e| {
                let (hi, lo) = (e.max.0 - base, base - e.min.0);
                let right = if hi >= lo { e.max.1 } else { e.min.1 };
                consider(witness_for(g, base, left, right));
            });
        }
        SearchMode::Sampled { samples, seed } => {
            let sizes_a: Vec<usize> = (1..=a.len()).filter(|&t| admissible(t, a.len(), eps)).collect();
            let sizes_b: Vec<usize> = (1..=b.len()).filter(|&t| admissible(t, b.len(), eps)).collect();
            if !sizes_a.is_empty() && !sizes_b.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..samples {
                    let ta = sizes_a[rng.random_range(0..sizes_a.len())];
                    let tb = sizes_b[rng.random_range(0..sizes_b.len())];
                    let left = sorted(sample(&mut rng, a.len(), ta).into_iter().map(|i| a[i]).collect());
                    let right = sample(&mut rng, b.len(), tb).into_iter().map(|i| b[i]).collect();
                    consider(witness_for(g, base, left, right));
                }
            }
        }
    }
    let worst_deviation = worst.as_ref().map_or(0.0, |w| w.deviation);
    let one_sided = matches!(mode, SearchMode::Sampled { .. });
    let verdict = if worst_deviation >= eps {
        Verdict::Irregular
    } else if one_sided && worst.is_some() {
        Verdict::NotRefuted
    } else {
        Verdict::Regular
    };
    Ok(PairRegularity {
        verdict,
        worst_deviation,
        witness: worst,
        one_sided,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPairReport {
    pub left_cell: usize,
    pub right_cell: usize,
    pub mode: SearchMode,
    #[serde(flatten)]
    pub result: PairRegularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub eps: f64,
    pub pairs: Vec<CellPairReport>,
    pub irregular_pairs: usize,
    pub not_refuted_pairs: usize,
    pub total_pairs: usize,
    pub irregular_fraction: f64,
    /// At most `eps` times the number of cell pairs are irregular.
    pub within_bound: bool,
    pub one_sided: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Seed for sampled checks of cells above [`EXACT_LIMIT`]; `None`
    /// turns oversized cells into an error.
    pub sampled_fallback: Option<u64>,
}

/// Audits every cross pair of cells of `px` (left) and `py` (right).
pub fn partition_regularity_report(
    g: &WeightedBipartiteGraph,
    px: &Partition,
    py: &Partition,
    eps: f64,
    options: ReportOptions,
) -> Result<RegularityReport> {
    for (p, n, side) in [(px, g.left, "left"), (py, g.right, "right")] {
        if p.len() != n {
            return Err(Error::LengthMismatch {
                what: if side == "left" {
                    "left partition"
                } else {
                    "right partition"
                },
                expected: n,
                got: p.len(),
            });
        }
    }
    let cells_x: Vec<Vec<usize>> = (0..px.k()).map(|c| px.members(c)).collect();
    let cells_y: Vec<Vec<usize>> = (0..py.k()).map(|c| py.members(c)).collect();
    let jobs: Vec<(usize, usize)> = (0..cells_x.len())
        .flat_map(|i| (0..cells_y.len()).map(move |j| (i, j)))
        .collect();
    let pairs = jobs
        .into_par_iter()
        .map(|(i, j)| {
            let (a, b) = (&cells_x[i], &cells_y[j]);
            let big = a.len().max(b.len()) > EXACT_LIMIT;
            let mode = match (big, options.sampled_fallback) {
                (false, _) => SearchMode::Exact,
                (true, Some(seed)) => SearchMode::sampled(seed ^ ((i as u64) << 32 | j as u64)),
                (true, None) => {
                    return Err(Error::CellTooLarge {
                        size: a.len().max(b.len()),
                        limit: EXACT_LIMIT,
                    })
                }
            };
            Ok(CellPairReport {
                left_cell: i,
                right_cell: j,
                mode,
                result: pair_regularity(g, a, b, eps, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let count = |v: Verdict| pairs.iter().filter(|p| p.result.verdict == v).count();
    let irregular_pairs = count(Verdict::Irregular);
    let total_pairs = pairs.len();
    Ok(RegularityReport {
        eps,
        irregular_pairs,
        not_refuted_pairs: count(Verdict::NotRefuted),
        total_pairs,
        irregular_fraction: irregular_pairs as f64 / total_pairs as f64,
        within_bound: irregular_pairs as f64 <= eps * total_pairs as f64,
        one_sided: pairs.iter().any(|p| p.result.one_sided),
        pairs,
    })
}

/// Density ratios against the global density `w(L, R) / (|L| |R|)` over
/// `A ⊆ L`, `B ⊆ R` with `|A| > beta |L|` and `|B| > beta |R|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiRandomness {
    pub beta: f64,
    pub ratio_max: f64,
    pub ratio_min: f64,
    /// `max(ratio_max, 1 / ratio_min)`: the smallest `D` the search
    /// certifies. Infinite when some admissible pair has no weight.
    pub d_hat: f64,
    pub densest: Witness,
    pub sparsest: Witness,
    /// Sampled searches only see part of the subsets, so `d_hat` is then a
    /// lower bound.
    pub lower_bound_only: bool,
}

pub fn quasi_randomness(g: &WeightedBipartiteGraph, beta: f64, mode: SearchMode) -> Result<QuasiRandomness> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0, 1), got {beta}")));
    }
    let total = g.total_weight();
    if total <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    let global = total / (g.left * g.right) as f64;
    let all_left: Vec<usize> = (0..g.left).collect();
    let all_right: Vec<usize> = (0..g.right).collect();
    let mut densest: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    let mut sparsest: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    let mut offer = |d: f64, left: &[usize], right: &[usize], max: bool| {
        let slot = if max { &mut densest } else { &mut sparsest };
        let better = slot.as_ref().is_none_or(|s| if max { d > s.0 } else { d < s.0 });
        if better {
            *slot = Some((d, left.to_vec(), sorted(right.to_vec())));
        }
    };
    match mode {
        SearchMode::Exact => {
            if g.left > EXACT_LIMIT {
                return Err(Error::CellTooLarge {
                    size: g.left,
                    limit: EXACT_LIMIT,
                });
            }
            for_each_extreme(g, &all_left, &all_right, beta, |left, e| {
                offer(e.max.0, &left, &e.max.1, true);
                offer(e.min.0, &left, &e.min.1, false);
            });
        }
        SearchMode::Sampled { samples, seed } => {
            let sizes_l: Vec<usize> = (1..=g.left).filter(|&t| admissible(t, g.left, beta)).collect();
            let sizes_r: Vec<usize> = (1..=g.right).filter(|&t| admissible(t, g.right, beta)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..samples {
                let tl = sizes_l[rng.random_range(0..sizes_l.len())];
                let tr = sizes_r[rng.random_range(0..sizes_r.len())];
                let left = sorted(sample(&mut rng, g.left, tl).into_vec());
                let right = sample(&mut rng, g.right, tr).into_vec();
                let d = g.density(&left, &right);
                offer(d, &left, &right, true);
                offer(d, &left, &right, false);
            }
        }
    }
    let (Some(hi), Some(lo)) = (densest, sparsest) else {
        return Err(Error::InvalidArgument("no admissible subsets".into()));
    };
    let witness = |(_, left, right): (f64, Vec<usize>, Vec<usize>)| {
        let deviation = (g.density(&left, &right) - global).abs();
        Witness { left, right, deviation }
    };
    let (ratio_max, ratio_min) = (g.density(&hi.1, &hi.2) / global, g.density(&lo.1, &lo.2) / global);
    Ok(QuasiRandomness {
        beta,
        ratio_max,
        ratio_min,
        d_hat: ratio_max.max(1.0 / ratio_min),
        densest: witness(hi),
        sparsest: witness(lo),
        lower_bound_only: matches!(mode, SearchMode::Sampled { .. }),
    })
}
