//! Exact partitions of small discrete structural causal models.
//!
//! A [`SyntheticScm`] is a confounded model `Z -> X`, `Z -> Y`, `X -> Y`
//! with binned outcome, parameterized by
//!
//! * `gamma[z]    = P(Z = z)`
//! * `beta[x][z]  = P(X = x | Z = z)`
//! * `alpha[x][z][k] = P(a_k < Y <= a_{k+1} | X = x, Z = z)`
//!
//! From these the observational distribution of the bin given `x` is
//! `sum_z gamma_z beta_xz alpha_kxz / sum_z gamma_z beta_xz`, and the
//! interventional one (the `Z -> X` edge cut) is `sum_z gamma_z alpha_kxz`.
//! The module builds the observational, causal and confounding partitions
//! of the micro-states and checks by Monte Carlo that the causal partition
//! coarsens the observational one.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Role};
use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-9;

/// Model sizes: confounder states, cause states, outcome bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub z: usize,
    pub x: usize,
    pub m: usize,
}

impl Dims {
    pub fn new(z: usize, x: usize, m: usize) -> Self {
        Self { z, x, m }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmTables")]
pub struct SyntheticScm {
    gamma: Vec<f64>,
    beta: Vec<Vec<f64>>,
    alpha: Vec<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
struct ScmTables {
    gamma: Vec<f64>,
    beta: Vec<Vec<f64>>,
    alpha: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<ScmTables> for SyntheticScm {
    type Error = Error;

    fn try_from(t: ScmTables) -> Result<Self> {
        SyntheticScm::new(t.gamma, t.beta, t.alpha)
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidDistribution(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Flat Dirichlet draw via normalized exponentials.
fn simplex(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / s).collect()
}

/// Which parameter draws the Monte Carlo uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScmFamily {
    /// gamma, beta and alpha all drawn freely.
    #[default]
    Unconstrained,
    /// alpha does not depend on z, so Z confounds nothing.
    NoConfounding,
}

impl SyntheticScm {
    /// `beta` is indexed `[x][z]`, `alpha` is indexed `[x][z][k]`.
    pub fn new(gamma: Vec<f64>, beta: Vec<Vec<f64>>, alpha: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let nz = gamma.len();
        let nx = beta.len();
        if nz == 0 || nx == 0 {
            return Err(Error::InvalidDistribution("empty state space".into()));
        }
        check_simplex(&gamma, "gamma")?;
        if beta.iter().any(|r| r.len() != nz) || alpha.len() != nx {
            return Err(Error::InvalidDistribution("table shapes disagree".into()));
        }
        for z in 0..nz {
            let col: Vec<f64> = beta.iter().map(|r| r[z]).collect();
            check_simplex(&col, &format!("beta[.][{z}]"))?;
        }
        let m = alpha[0].first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::InvalidDistribution("alpha has no bins".into()));
        }
        for (x, slab) in alpha.iter().enumerate() {
            if slab.len() != nz {
                return Err(Error::InvalidDistribution("alpha shape disagrees with gamma".into()));
            }
            for (z, dist) in slab.iter().enumerate() {
                if dist.len() != m {
                    return Err(Error::InvalidDistribution("ragged alpha".into()));
                }
                check_simplex(dist, &format!("alpha[{x}][{z}]"))?;
            }
        }
        Ok(Self { gamma, beta, alpha })
    }

    pub fn random(dims: Dims, family: ScmFamily, rng: &mut impl Rng) -> Self {
        let gamma = simplex(dims.z, rng);
        let cols: Vec<Vec<f64>> = (0..dims.z).map(|_| simplex(dims.x, rng)).collect();
        let beta = (0..dims.x).map(|x| cols.iter().map(|c| c[x]).collect()).collect();
        let alpha = (0..dims.x)
            .map(|_| match family {
                ScmFamily::Unconstrained => (0..dims.z).map(|_| simplex(dims.m, rng)).collect(),
                ScmFamily::NoConfounding => vec![simplex(dims.m, rng); dims.z],
            })
            .collect();
        Self { gamma, beta, alpha }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.gamma.len(), self.beta.len(), self.alpha[0][0].len())
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[Vec<f64>] {
        &self.beta
    }

    pub fn alpha(&self) -> &[Vec<Vec<f64>>] {
        &self.alpha
    }

    /// Same model with a different confounder distribution.
    pub fn with_gamma(&self, gamma: Vec<f64>) -> Result<Self> {
        Self::new(gamma, self.beta.clone(), self.alpha.clone())
    }

    /// Makes state `dst` a copy of `src` in both `P(x|z)` (columns are
    /// renormalized) and `P(y|x,z)`, so the two become observationally and
    /// causally equivalent.
    pub fn with_duplicated_state(&self, src: usize, dst: usize) -> Result<Self> {
        let mut beta = self.beta.clone();
        beta[dst] = beta[src].clone();
        for z in 0..self.gamma.len() {
            let s: f64 = beta.iter().map(|r| r[z]).sum();
            beta.iter_mut().for_each(|r| r[z] /= s);
        }
        let mut alpha = self.alpha.clone();
        alpha[dst] = alpha[src].clone();
        Self::new(self.gamma.clone(), beta, alpha)
    }

    /// Marginal `P(X = x)`.
    pub fn p_x(&self, x: usize) -> f64 {
        self.gamma.iter().zip(&self.beta[x]).map(|(g, b)| g * b).sum()
    }

    /// `P(bin | X = x)` by the law of total probability over `Z`.
    pub fn observational(&self, x: usize) -> Result<Vec<f64>> {
        let px = self.p_x(x);
        if px <= 0.0 {
            return Err(Error::ZeroProbabilityState(x));
        }
        let m = self.dims().m;
        Ok((0..m)
            .map(|k| {
                (0..self.gamma.len())
                    .map(|z| self.gamma[z] * self.beta[x][z] * self.alpha[x][z][k])
                    .sum::<f64>()
                    / px
            })
            .collect())
    }

    /// `P(bin | do(X = x))`.
    pub fn interventional(&self, x: usize) -> Vec<f64> {
        let m = self.dims().m;
        (0..m)
            .map(|k| (0..self.gamma.len()).map(|z| self.gamma[z] * self.alpha[x][z][k]).sum())
            .collect()
    }

    fn observational_all(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.beta.len()).map(|x| self.observational(x)).collect()
    }

    fn interventional_all(&self) -> Vec<Vec<f64>> {
        (0..self.beta.len()).map(|x| self.interventional(x)).collect()
    }
}

/// Equivalence classes of micro-states, numbered by first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactPartition {
    pub class_of: Vec<usize>,
    pub n_classes: usize,
}

impl ExactPartition {
    pub fn from_classes(class_of: &[usize]) -> Self {
        let p = crate::clustering::Partition::compact(class_of);
        Self {
            n_classes: p.k(),
            class_of: p.labels().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn is_discrete(&self) -> bool {
        self.n_classes == self.class_of.len()
    }
}

/// Groups vectors whose entries agree within `tol`.
///
/// Tolerance equality is not transitive, so vectors are sorted
/// lexicographically and each is merged with its predecessor when their
/// largest coordinate gap is at most `tol`. The result is deterministic and
/// coincides with exact equality classes whenever those are well separated.
pub fn partition_vectors(vectors: &[Vec<f64>], tol: f64) -> ExactPartition {
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.sort_by(|&a, &b| {
        vectors[a]
            .iter()
            .zip(&vectors[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut group = vec![0; vectors.len()];
    let mut current = 0;
    for w in 0..order.len() {
        if w > 0 && max_gap(&vectors[order[w - 1]], &vectors[order[w]]) > tol {
            current += 1;
        }
        group[order[w]] = current;
    }
    ExactPartition::from_classes(&group)
}

pub fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smallest max-coordinate gap over all pairs; infinite for fewer than two vectors.
pub fn min_pairwise_gap(vectors: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            best = best.min(max_gap(&vectors[i], &vectors[j]));
        }
    }
    best
}

/// Which micro-variable is partitioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// States of X, compared by their distribution over outcome bins.
    #[default]
    Cause,
    /// Outcome bins, compared by their probability under every state of X.
    Effect,
}

fn transpose(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = v.first().map_or(0, Vec::len);
    (0..cols).map(|j| v.iter().map(|r| r[j]).collect()).collect()
}

/// `x1 ~ x2` iff `P(bin | x1)` and `P(bin | x2)` agree within `tol` on every bin.
pub fn observational_partition(scm: &SyntheticScm, tol: f64) -> Result<ExactPartition> {
    observational_partition_on(scm, tol, Side::Cause)
}

/// `x1 ~ x2` iff `P(bin | do(x1))` and `P(bin | do(x2))` agree within `tol`.
pub fn causal_partition(scm: &SyntheticScm, tol: f64) -> ExactPartition {
    causal_partition_on(scm, tol, Side::Cause)
}

pub fn observational_partition_on(scm: &SyntheticScm, tol: f64, side: Side) -> Result<ExactPartition> {
    let v = scm.observational_all()?;
    Ok(match side {
        Side::Cause => partition_vectors(&v, tol),
        Side::Effect => partition_vectors(&transpose(&v), tol),
    })
}

pub fn causal_partition_on(scm: &SyntheticScm, tol: f64, side: Side) -> ExactPartition {
    let v = scm.interventional_all();
    match side {
        Side::Cause => partition_vectors(&v, tol),
        Side::Effect => partition_vectors(&transpose(&v), tol),
    }
}

/// `x1 ~ x2` iff `P(x1 | z)` and `P(x2 | z)` agree within `tol` for every `z`.
pub fn confounding_partition(scm: &SyntheticScm, tol: f64) -> ExactPartition {
    partition_vectors(&scm.beta, tol)
}

/// True iff every class of `fine` sits inside one class of `coarse`.
pub fn is_coarsening(coarse: &ExactPartition, fine: &ExactPartition) -> Result<bool> {
    if coarse.len() != fine.len() {
        return Err(Error::LengthMismatch {
            what: "partition ground set",
            expected: fine.len(),
            got: coarse.len(),
        });
    }
    let mut image = vec![None; fine.n_classes];
    for (&f, &c) in fine.class_of.iter().zip(&coarse.class_of) {
        match image[f] {
            None => image[f] = Some(c),
            Some(prev) if prev != c => return Ok(false),
            Some(_) => {}
        }
    }
    Ok(true)
}

/// Left-hand side of the polynomial constraint whose vanishing (for every
/// bin) is observational equivalence of `x1` and `x2`:
/// `sum_{z1,z2} g_z1 g_z2 (b_x1z1 a_kx1z1 b_x2z2 - b_x2z1 a_kx2z1 b_x1z2)`.
pub fn constraint_residual(scm: &SyntheticScm, x1: usize, x2: usize, k: usize) -> f64 {
    let nz = scm.gamma.len();
    let mut total = 0.0;
    for z1 in 0..nz {
        for z2 in 0..nz {
            total += scm.gamma[z1] * scm.gamma[z2] * residual_term(scm, x1, x2, k, z1, z2);
        }
    }
    total
}

fn residual_term(scm: &SyntheticScm, x1: usize, x2: usize, k: usize, z1: usize, z2: usize) -> f64 {
    let (b, a) = (&scm.beta, &scm.alpha);
    b[x1][z1] * a[x1][z1][k] * b[x2][z2] - b[x2][z1] * a[x2][z1][k] * b[x1][z2]
}

/// Confounder distribution that breaks a satisfied constraint: with `K`
/// confounder states, find a positive summand at `(z1+, z2+)` and a negative
/// one at `(z1-, z2-)` with `z1+ != z1-`, then put `3/(2K)` on `z1+`, `1/(2K)`
/// on `z1-` and `1/K` everywhere else. `None` when no such pair exists.
pub fn constraint_breaking_gamma(scm: &SyntheticScm, x1: usize, x2: usize, k: usize) -> Option<Vec<f64>> {
    let nz = scm.gamma.len();
    let terms: Vec<(usize, f64)> = (0..nz)
        .flat_map(|z1| (0..nz).map(move |z2| (z1, z2)))
        .map(|(z1, z2)| (z1, residual_term(scm, x1, x2, k, z1, z2)))
        .collect();
    let (plus, minus) = terms
        .iter()
        .filter(|t| t.1 > 0.0)
        .flat_map(|p| terms.iter().filter(|t| t.1 < 0.0).map(move |q| (p.0, q.0)))
        .find(|(p, q)| p != q)?;
    let kf = nz as f64;
    let mut gamma = vec![1.0 / kf; nz];
    gamma[plus] = 3.0 / (2.0 * kf);
    gamma[minus] = 1.0 / (2.0 * kf);
    Some(gamma)
}

/// Draws `n` rows `(x, y)` (and `z` if `expose_z`). With `intervene = Some(x)`
/// every row has that `x` and `y` follows `P(bin | do(x))`.
pub fn sample_dataset(
    scm: &SyntheticScm,
    n: usize,
    seed: u64,
    intervene: Option<usize>,
    expose_z: bool,
) -> Result<Dataset> {
    let dims = scm.dims();
    if let Some(x) = intervene {
        if x >= dims.x {
            return Err(Error::InvalidArgument(format!("state {x} out of range")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_dist = WeightedIndex::new(&scm.gamma).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    let x_given_z: Vec<Option<WeightedIndex<f64>>> = (0..dims.z)
        .map(|z| WeightedIndex::new(scm.beta.iter().map(|r| r[z])).ok())
        .collect();
    let (mut xs, mut ys, mut zs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let z = z_dist.sample(&mut rng);
        let x = match intervene {
            Some(x) => x,
            None => x_given_z[z]
                .as_ref()
                .ok_or_else(|| Error::InvalidDistribution(format!("beta column {z} is all zero")))?
                .sample(&mut rng),
        };
        let y = WeightedIndex::new(&scm.alpha[x][z])
            .map_err(|e| Error::InvalidDistribution(e.to_string()))?
            .sample(&mut rng);
        xs.push(x as f64);
        ys.push(y as f64);
        zs.push(z as f64);
    }
    let mut cols = vec![
        ("x".to_string(), Role::Covariate, xs),
        ("y".to_string(), Role::Outcome, ys),
    ];
    if expose_z {
        cols.push(("z".to_string(), Role::Covariate, zs));
    }
    Dataset::new(cols)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CctConfig {
    pub trials: usize,
    pub dims: Dims,
    pub seed: u64,
    pub tol: f64,
    /// Draws whose closest pair of observational vectors is within this gap
    /// are reported as degenerate.
    pub degenerate_margin: f64,
    pub family: ScmFamily,
    pub side: Side,
}

impl CctConfig {
    pub fn new(trials: usize, dims: Dims, seed: u64) -> Self {
        Self {
            trials,
            dims,
            seed,
            tol: 1e-9,
            degenerate_margin: 1e-6,
            family: ScmFamily::Unconstrained,
            side: Side::Cause,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CctReport {
    pub trials: usize,
    pub dims: Dims,
    pub seed: u64,
    pub tol: f64,
    pub degenerate_margin: f64,
    pub family: ScmFamily,
    pub side: Side,
    /// Draws where the causal partition does not coarsen the observational one.
    pub violations: usize,
    pub degenerate_draws: usize,
    /// Draws where the two partitions coincide.
    pub identical_partitions: usize,
    /// Trial indices of the violations.
    pub violating_trials: Vec<usize>,
}

struct TrialOutcome {
    violation: bool,
    degenerate: bool,
    identical: bool,
}

fn trial(cfg: &CctConfig, index: usize) -> Result<TrialOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let scm = SyntheticScm::random(cfg.dims, cfg.family, &mut rng);
    let obs = observational_partition_on(&scm, cfg.tol, cfg.side)?;
    let cau = causal_partition_on(&scm, cfg.tol, cfg.side);
    let obs_vectors = match cfg.side {
        Side::Cause => scm.observational_all()?,
        Side::Effect => transpose(&scm.observational_all()?),
    };
    Ok(TrialOutcome {
        violation: !is_coarsening(&cau, &obs)?,
        degenerate: min_pairwise_gap(&obs_vectors) <= cfg.degenerate_margin,
        identical: obs == cau,
    })
}

/// Draws random models and counts how often the causal partition fails to
/// coarsen the observational one. Trial `i` uses ChaCha stream `i` of the
/// master seed, so the report does not depend on the thread count.
pub fn cct_monte_carlo(cfg: &CctConfig) -> Result<CctReport> {
    if cfg.dims.z == 0 || cfg.dims.x == 0 || cfg.dims.m == 0 {
        return Err(Error::InvalidArgument(format!("bad dims {:?}", cfg.dims)));
    }
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| trial(cfg, i))
        .collect::<Result<_>>()?;
    let violating_trials: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.violation)
        .map(|(i, _)| i)
        .collect();
    Ok(CctReport {
        trials: cfg.trials,
        dims: cfg.dims,
        seed: cfg.seed,
        tol: cfg.tol,
        degenerate_margin: cfg.degenerate_margin,
        family: cfg.family,
        side: cfg.side,
        violations: violating_trials.len(),
        degenerate_draws: outcomes.iter().filter(|o| o.degenerate).count(),
        identical_partitions: outcomes.iter().filter(|o| o.identical).count(),
        violating_trials,
    })
}
