//! Downstream causal analyses on macrostates.
//!
//! Least squares with named coefficients, regressions of the outcome on
//! treatment dummies and cluster indicators, heterogeneity flags read off a
//! partition of `(treatment, stratum)` rows, propensity-score matching with
//! balance diagnostics and a pair bootstrap, and a check that stratifying on
//! macrostates recovers the same effect as stratifying on micro-states.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::clustering::Partition;
use crate::data::{mean_sd, Dataset};
use crate::error::{Error, Result};

/// Relative residual below which a column counts as a combination of the
/// columns before it.
const COLLINEAR_TOL: f64 = 1e-9;

/// Named regressor columns of equal length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Design {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    n: usize,
}

impl Design {
    pub fn new(n: usize) -> Self {
        Self { n, ..Self::default() }
    }

    pub fn with_intercept(n: usize) -> Self {
        let mut d = Self::new(n);
        d.columns.push(vec![1.0; n]);
        d.names.push("Intercept".into());
        d
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n {
            return Err(Error::LengthMismatch {
                what: "design column",
                expected: self.n,
                got: values.len(),
            });
        }
        self.names.push(name.into());
        self.columns.push(values);
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.columns.len(), |i, j| self.columns[j][i])
    }

    /// Columns that lie in the span of the columns before them, found by
    /// Gram-Schmidt with reorthogonalization.
    pub fn collinear_columns(&self) -> Vec<String> {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut bad = Vec::new();
        for (name, col) in self.names.iter().zip(&self.columns) {
            let v = DVector::from_column_slice(col);
            let norm = v.norm();
            let mut r = v;
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&r);
                    r -= q * c;
                }
            }
            let rn = r.norm();
            if norm == 0.0 || rn <= COLLINEAR_TOL * norm {
                bad.push(name.clone());
            } else {
                basis.push(r / rn);
            }
        }
        bad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub coef: f64,
    pub se: f64,
    /// `None` when the standard error is zero.
    pub t: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsResult {
    pub coefficients: Vec<Coefficient>,
    pub n: usize,
    pub df: usize,
    pub r_squared: f64,
    /// Heteroskedasticity-consistent (HC1) standard errors.
    pub robust: bool,
    #[serde(skip)]
    pub fitted: Vec<f64>,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl OlsResult {
    pub fn get(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn coef(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.coef).collect()
    }

    /// One row per coefficient: name, estimate, standard error, t, p.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["variable", "coef", "std_err", "t", "p"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for c in &self.coefficients {
            out.write_record([c.name.clone(), c.coef.to_string(), c.se.to_string(), opt(c.t), opt(c.p)])?;
        }
        out.flush().map_err(|e| Error::Io {
            path: "<table>".into(),
            source: e,
        })
    }
}

/// Least squares via QR with classical standard errors.
pub fn ols(y: &[f64], design: &Design) -> Result<OlsResult> {
    ols_with(y, design, false)
}

/// Least squares via QR; `robust` switches to HC1 standard errors.
/// Two-sided p-values use the t distribution with `n - k` degrees of freedom.
pub fn ols_with(y: &[f64], design: &Design, robust: bool) -> Result<OlsResult> {
    let (n, k) = (design.n_rows(), design.n_cols());
    if y.len() != n {
        return Err(Error::LengthMismatch {
            what: "outcome",
            expected: n,
            got: y.len(),
        });
    }
    if k == 0 || n <= k {
        return Err(Error::InvalidArgument(format!(
            "need more rows than columns, got {n} x {k}"
        )));
    }
    let bad = design.collinear_columns();
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    let x = design.matrix();
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let beta = r
        .solve_upper_triangular(&(q.transpose() * &yv))
        .ok_or_else(|| Error::RankDeficient(design.names.clone()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::RankDeficient(design.names.clone()))?;
    let bread = &r_inv * r_inv.transpose();
    let fitted = &x * &beta;
    let resid = &yv - &fitted;
    let df = n - k;
    let rss = resid.norm_squared();
    let cov = if robust {
        let mut meat = DMatrix::zeros(k, k);
        for i in 0..n {
            let row = x.row(i).transpose();
            meat += &row * row.transpose() * resid[i].powi(2);
        }
        (&bread * meat * &bread) * (n as f64 / df as f64)
    } else {
        bread * (rss / df as f64)
    };
    let mean_y = yv.mean();
    let tss: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    let r_squared = if rss == 0.0 { 1.0 } else { 1.0 - rss / tss };
    let t_dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let coefficients = (0..k)
        .map(|j| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let t = (se > 0.0).then(|| beta[j] / se);
            Coefficient {
                name: design.names[j].clone(),
                coef: beta[j],
                se,
                t,
                p: t.map(|t| (2.0 * t_dist.sf(t.abs())).min(1.0)),
            }
        })
        .collect();
    Ok(OlsResult {
        coefficients,
        n,
        df,
        r_squared,
        robust,
        fitted: fitted.iter().copied().collect(),
        residuals: resid.iter().copied().collect(),
    })
}

/// `[Intercept, t, m_dummy, m_dummy_x_t]` where `m_dummy = 1[m > mean(m)]`.
pub fn interaction_design(d: &Dataset, treatment: &str, moderator: &str) -> Result<Design> {
    let t = d.values(treatment)?;
    let m = d.values(moderator)?;
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    let dummy: Vec<f64> = m.iter().map(|&v| f64::from(u8::from(v > mean))).collect();
    let inter: Vec<f64> = dummy.iter().zip(t).map(|(a, b)| a * b).collect();
    let mut design = Design::with_intercept(d.n());
    design.push(treatment, t.to_vec())?;
    design.push(format!("{moderator}_dummy"), dummy)?;
    design.push(format!("{moderator}_dummy_x_{treatment}"), inter)?;
    Ok(design)
}

/// Regresses the outcome on treatment, a mean-split dummy of `moderator`
/// and their product.
pub fn interaction_regression(d: &Dataset, moderator: &str) -> Result<OlsResult> {
    let treatment = d.treatment()?.name.clone();
    ols(&d.outcome()?.values, &interaction_design(d, &treatment, moderator)?)
}

/// One-hot encoding of a partition over its first `K - 1` classes; rows in
/// the last class are all zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacrostateIndicator {
    pub k: usize,
    pub labels: Vec<usize>,
}

impl MacrostateIndicator {
    pub fn width(&self) -> usize {
        self.k - 1
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.width()).map(|c| format!("cluster_{c}")).collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.width())
            .map(|c| f64::from(u8::from(self.labels[i] == c)))
            .collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.width())
            .map(|c| self.labels.iter().map(|&l| f64::from(u8::from(l == c))).collect())
            .collect()
    }
}

pub fn macrostate_indicators(p: &Partition) -> MacrostateIndicator {
    MacrostateIndicator {
        k: p.k(),
        labels: p.labels().to_vec(),
    }
}

fn check_aligned(d: &Dataset, p: &Partition) -> Result<()> {
    if d.n() != p.len() {
        return Err(Error::LengthMismatch {
            what: "partition",
            expected: d.n(),
            got: p.len(),
        });
    }
    Ok(())
}

fn check_binary(d: &Dataset, column: &str) -> Result<Vec<f64>> {
    let v = d.values(column)?;
    if let Some((row, &value)) = v.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(Error::NonBinaryTreatment {
            column: column.to_string(),
            row,
            value,
        });
    }
    Ok(v.to_vec())
}

/// Outcome on an intercept, the binary `treatments` and `K - 1` cluster
/// indicators. No other covariates enter.
pub fn cluster_indicator_regression(
    d: &Dataset,
    p: &Partition,
    treatments: &[&str],
    robust: bool,
) -> Result<OlsResult> {
    check_aligned(d, p)?;
    let mut design = Design::with_intercept(d.n());
    for t in treatments {
        design.push(*t, check_binary(d, t)?)?;
    }
    let m = macrostate_indicators(p);
    for (name, col) in m.names().into_iter().zip(m.columns()) {
        design.push(name, col)?;
    }
    ols_with(&d.outcome()?.values, &design, robust)
}

/// Majority-vote macrostates of the treated and control rows of one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCells {
    pub stratum: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub treated_cluster: usize,
    pub control_cluster: usize,
    pub co_clustered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStratum {
    pub stratum: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeterogeneityLabel {
    Causal,
    PotentiallySelectionBiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub strata: Vec<StratumCells>,
    pub skipped: Vec<SkippedStratum>,
    /// `(j, i)`: treatment arms share a macrostate in stratum `j` but not in `i`.
    pub case_one: Option<(f64, f64)>,
    /// `(i, j)`: treated rows of both strata share a macrostate, control rows do not.
    pub case_two: Option<(f64, f64)>,
    pub heterogeneous: bool,
    pub randomized: bool,
    /// Causal only when treatment assignment is asserted to be randomized.
    pub label: HeterogeneityLabel,
}

fn majority(labels: impl Iterator<Item = usize>, k: usize) -> usize {
    let mut counts = vec![0usize; k];
    labels.for_each(|l| counts[l] += 1);
    // ties go to the lowest cluster index
    counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(c, _)| c)
}

fn distinct_sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Flags heterogeneous treatment effects from the macrostates of
/// `(treatment, stratum)` rows.
///
/// Case one: in some stratum treated and control rows share a macrostate
/// while in another they do not. Case two: treated rows of two strata share
/// a macrostate while their control rows do not. Strata with one arm only
/// are skipped and reported.
pub fn heterogeneity_flags(d: &Dataset, p: &Partition, stratum: &str, randomized: bool) -> Result<HeterogeneityReport> {
    check_aligned(d, p)?;
    let treat = &d.treatment()?.values;
    let x = d.values(stratum)?;
    let (mut strata, mut skipped) = (Vec::new(), Vec::new());
    for s in distinct_sorted(x) {
        let rows = |arm: f64| (0..d.n()).filter(move |&i| x[i] == s && treat[i] == arm);
        let (n_treated, n_control) = (rows(1.0).count(), rows(0.0).count());
        if n_treated == 0 || n_control == 0 {
            let arm = if n_treated == 0 { "treated" } else { "control" };
            skipped.push(SkippedStratum {
                stratum: s,
                reason: format!("no {arm} rows"),
            });
            continue;
        }
        let treated_cluster = majority(rows(1.0).map(|i| p.labels()[i]), p.k());
        let control_cluster = majority(rows(0.0).map(|i| p.labels()[i]), p.k());
        strata.push(StratumCells {
            stratum: s,
            n_treated,
            n_control,
            treated_cluster,
            control_cluster,
            co_clustered: treated_cluster == control_cluster,
        });
    }
    let case_one = strata
        .iter()
        .filter(|j| j.co_clustered)
        .flat_map(|j| {
            strata
                .iter()
                .filter(|i| !i.co_clustered)
                .map(move |i| (j.stratum, i.stratum))
        })
        .next();
    let case_two = strata
        .iter()
        .enumerate()
        .flat_map(|(a, i)| strata[a + 1..].iter().map(move |j| (i, j)))
        .find(|(i, j)| i.treated_cluster == j.treated_cluster && i.control_cluster != j.control_cluster)
        .map(|(i, j)| (i.stratum, j.stratum));
    Ok(HeterogeneityReport {
        heterogeneous: case_one.is_some() || case_two.is_some(),
        label: if randomized {
            HeterogeneityLabel::Causal
        } else {
            HeterogeneityLabel::PotentiallySelectionBiased
        },
        strata,
        skipped,
        case_one,
        case_two,
        randomized,
    })
}

/// Logistic regression of treatment on covariates. Coefficients and
/// standard errors are on the original covariate scale, intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub covariates: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const IRLS_MAX_ITER: usize = 100;
const IRLS_GRAD_TOL: f64 = 1e-8;
/// Standardized coefficients beyond this size mean the likelihood has no maximum.
const SEPARATION_COEF: f64 = 15.0;
/// Scores this close to 0 or 1 only arise when the coefficients run off.
const SEPARATION_SCORE: f64 = 1e-8;

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Fits propensity scores by iteratively reweighted least squares on
/// internally standardized covariates. The outcome is never read.
pub fn propensity_fit(d: &Dataset, covariates: &[&str]) -> Result<PropensityModel> {
    let y = &d.treatment()?.values;
    if !y.contains(&1.0) {
        return Err(Error::NoUnits("treated"));
    }
    if !y.contains(&0.0) {
        return Err(Error::NoUnits("control"));
    }
    let n = d.n();
    let mut design = Design::with_intercept(n);
    let mut scales = Vec::with_capacity(covariates.len());
    for c in covariates {
        let v = d.values(c)?;
        let (mean, sd) = mean_sd(v);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        design.push(*c, v.iter().map(|x| (x - mean) / sd).collect())?;
        scales.push((mean, sd));
    }
    let bad = design.collinear_columns();
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    let x = design.matrix();
    let yv = DVector::from_column_slice(y);
    let k = x.ncols();
    let mut beta = DVector::zeros(k);
    let (mut iterations, mut converged) = (0, false);
    let separation = |beta: &DVector<f64>| {
        let named: Vec<String> = covariates
            .iter()
            .enumerate()
            .filter(|(j, _)| beta[j + 1].abs() > SEPARATION_COEF)
            .map(|(_, c)| c.to_string())
            .collect();
        Error::Separation(if named.is_empty() {
            covariates.iter().map(|c| c.to_string()).collect()
        } else {
            named
        })
    };
    let mut hessian = DMatrix::zeros(k, k);
    while iterations < IRLS_MAX_ITER {
        let p = (&x * &beta).map(sigmoid);
        let grad = x.transpose() * (&yv - &p);
        let w = p.map(|p| p * (1.0 - p));
        hessian = x.transpose() * DMatrix::from_fn(n, k, |i, j| x[(i, j)] * w[i]);
        if grad.norm() < IRLS_GRAD_TOL {
            converged = true;
            break;
        }
        let Some(chol) = hessian.clone().cholesky() else {
            return Err(separation(&beta));
        };
        beta += chol.solve(&grad);
        iterations += 1;
        if beta.iter().skip(1).any(|b| b.abs() > SEPARATION_COEF) {
            return Err(separation(&beta));
        }
    }
    let scores: Vec<f64> = (&x * &beta).map(sigmoid).iter().copied().collect();
    let perfect = scores.iter().zip(y).all(|(s, t)| (s - t).abs() < 1e-6);
    if perfect
        || scores
            .iter()
            .any(|&s| !(SEPARATION_SCORE..=1.0 - SEPARATION_SCORE).contains(&s))
    {
        return Err(separation(&beta));
    }
    let Some(cov_std) = hessian.cholesky().map(|c| c.inverse()) else {
        return Err(separation(&beta));
    };
    // map standardized coefficients back: b_j / s_j and b_0 - sum b_j m_j / s_j
    let mut t = DMatrix::identity(k, k);
    for (j, &(mean, sd)) in scales.iter().enumerate() {
        t[(0, j + 1)] = -mean / sd;
        t[(j + 1, j + 1)] = 1.0 / sd;
    }
    let coef = &t * &beta;
    let cov = &t * cov_std * t.transpose();
    Ok(PropensityModel {
        covariates: covariates.iter().map(|c| c.to_string()).collect(),
        coef: coef.iter().copied().collect(),
        se: (0..k).map(|j| cov[(j, j)].sqrt()).collect(),
        scores,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(treated row, control row)`, in matching order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_treated: Vec<usize>,
    pub caliper: Option<f64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ScoreKey(f64, usize);

impl Eq for ScoreKey {}

impl PartialOrd for ScoreKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ScoreKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Greedy nearest-neighbour matching without replacement.
///
/// Treated rows are visited in descending score order (ties by row index);
/// each takes the unused control closest in score, the lower row index on
/// ties, provided the gap is within `caliper`.
pub fn nn_match(scores: &[f64], treat: &[f64], caliper: Option<f64>) -> Result<MatchResult> {
    if scores.len() != treat.len() {
        return Err(Error::LengthMismatch {
            what: "treatment vector",
            expected: scores.len(),
            got: treat.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let mut controls: BTreeSet<ScoreKey> = (0..scores.len())
        .filter(|&i| treat[i] == 0.0)
        .map(|i| ScoreKey(scores[i], i))
        .collect();
    let mut treated: Vec<usize> = (0..scores.len()).filter(|&i| treat[i] == 1.0).collect();
    treated.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut pairs, mut unmatched_treated) = (Vec::new(), Vec::new());
    for t in treated {
        let s = scores[t];
        let above = controls.range(ScoreKey(s, 0)..).next().copied();
        // among equal scores below, the lowest index wins
        let below = controls
            .range(..ScoreKey(s, 0))
            .next_back()
            .and_then(|k| controls.range(ScoreKey(k.0, 0)..).next().copied());
        let best = match (above, below) {
            (Some(a), Some(b)) => {
                let (da, db) = (a.0 - s, s - b.0);
                Some(if da < db || (da == db && a.1 < b.1) { a } else { b })
            }
            (a, b) => a.or(b),
        };
        match best.filter(|c| caliper.is_none_or(|cal| (c.0 - s).abs() <= cal)) {
            Some(c) => {
                controls.remove(&c);
                pairs.push((t, c.1));
            }
            None => unmatched_treated.push(t),
        }
    }
    Ok(MatchResult {
        pairs,
        unmatched_treated,
        caliper,
        scores: scores.to_vec(),
    })
}

/// Matches on fitted propensity scores.
pub fn propensity_match(
    d: &Dataset,
    covariates: &[&str],
    caliper: Option<f64>,
) -> Result<(PropensityModel, MatchResult)> {
    let model = propensity_fit(d, covariates)?;
    let m = nn_match(&model.scores, &d.treatment()?.values, caliper)?;
    Ok((model, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    pub smd_before: f64,
    pub smd_after: f64,
    /// Set when a pooled standard deviation is zero; the SMD is then reported as 0.
    pub zero_sd_before: bool,
    pub zero_sd_after: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariates: Vec<CovariateBalance>,
    pub n_pairs: usize,
}

/// `(mean_T - mean_C) / sqrt((var_T + var_C) / 2)` and whether the pooled sd vanished.
pub fn standardized_mean_difference(treated: &[f64], control: &[f64]) -> (f64, bool) {
    let (mt, st) = mean_sd(treated);
    let (mc, sc) = mean_sd(control);
    let pooled = ((st * st + sc * sc) / 2.0).sqrt();
    if pooled == 0.0 || !pooled.is_finite() {
        (0.0, true)
    } else {
        ((mt - mc) / pooled, false)
    }
}

pub fn balance_report(d: &Dataset, m: &MatchResult, covariates: &[&str]) -> Result<BalanceReport> {
    let treat = &d.treatment()?.values;
    check_pairs(d, m)?;
    let covariates = covariates
        .iter()
        .map(|c| {
            let v = d.values(c)?;
            let arm = |a: f64| -> Vec<f64> { (0..d.n()).filter(|&i| treat[i] == a).map(|i| v[i]).collect() };
            let (smd_before, zero_sd_before) = standardized_mean_difference(&arm(1.0), &arm(0.0));
            let mt: Vec<f64> = m.pairs.iter().map(|p| v[p.0]).collect();
            let mc: Vec<f64> = m.pairs.iter().map(|p| v[p.1]).collect();
            let (smd_after, zero_sd_after) = standardized_mean_difference(&mt, &mc);
            Ok(CovariateBalance {
                covariate: c.to_string(),
                smd_before,
                smd_after,
                zero_sd_before,
                zero_sd_after,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BalanceReport {
        covariates,
        n_pairs: m.pairs.len(),
    })
}

fn check_pairs(d: &Dataset, m: &MatchResult) -> Result<()> {
    let treat = &d.treatment()?.values;
    for &(t, c) in &m.pairs {
        if t >= d.n() || c >= d.n() || treat[t] != 1.0 || treat[c] != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pair ({t}, {c}) is not a treated/control pair"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub ate: f64,
    pub se: f64,
    pub n_pairs: usize,
    pub replicates: usize,
    pub seed: u64,
}

pub const MIN_BOOTSTRAP: usize = 100;

/// Mean treated-minus-control outcome over matched pairs, with the standard
/// deviation of that mean over `b` pair resamples as its standard error.
/// Replicate `r` draws from ChaCha stream `r` of `seed`.
pub fn ate_bootstrap(d: &Dataset, m: &MatchResult, outcome: &str, b: usize, seed: u64) -> Result<AteEstimate> {
    if b < MIN_BOOTSTRAP {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_BOOTSTRAP} bootstrap replicates, got {b}"
        )));
    }
    if m.pairs.is_empty() {
        return Err(Error::NoUnits("matched pair"));
    }
    check_pairs(d, m)?;
    let y = d.values(outcome)?;
    let diffs: Vec<f64> = m.pairs.iter().map(|&(t, c)| y[t] - y[c]).collect();
    let np = diffs.len();
    let ate = diffs.iter().sum::<f64>() / np as f64;
    let reps: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            (0..np).map(|_| diffs[rng.random_range(0..np)]).sum::<f64>() / np as f64
        })
        .collect();
    Ok(AteEstimate {
        ate,
        se: mean_sd(&reps).1,
        n_pairs: np,
        replicates: b,
        seed,
    })
}

/// Size-weighted average of within-stratum differences in mean outcome.
pub fn stratified_ate(y: &[f64], treat: &[f64], strata: &[usize]) -> Result<f64> {
    if y.len() != treat.len() || y.len() != strata.len() {
        return Err(Error::LengthMismatch {
            what: "stratified columns",
            expected: y.len(),
            got: treat.len().min(strata.len()),
        });
    }
    let k = strata.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![[0usize; 2]; k];
    for i in 0..y.len() {
        let arm = usize::from(treat[i] == 1.0);
        sums[strata[i]][arm] += y[i];
        counts[strata[i]][arm] += 1;
    }
    let mut ate = 0.0;
    for s in 0..k {
        let [c0, c1] = counts[s];
        if c0 + c1 == 0 {
            continue;
        }
        if c0 == 0 || c1 == 0 {
            return Err(Error::EmptyStratum {
                stratum: s.to_string(),
                detail: format!("{c1} treated and {c0} control rows"),
            });
        }
        let effect = sums[s][1] / c1 as f64 - sums[s][0] / c0 as f64;
        ate += effect * (c0 + c1) as f64 / y.len() as f64;
    }
    Ok(ate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnconfoundednessReport {
    pub ate_x: f64,
    pub ate_m: f64,
    pub true_tau: Option<f64>,
    pub sd_y: f64,
    /// `|ate_m - ate_x|`.
    pub gap: f64,
    /// Largest of the pairwise gaps between `ate_m`, `ate_x` and `true_tau`.
    pub max_discrepancy: f64,
}

/// Compares the effect stratified on the levels of `x` with the effect
/// stratified on macrostates, where level `l` of `x` belongs to class
/// `class_of_level[l]`.
pub fn unconfoundedness_preservation_test(
    d: &Dataset,
    x: &str,
    class_of_level: &[usize],
    true_tau: Option<f64>,
) -> Result<UnconfoundednessReport> {
    let xs = d.values(x)?;
    let levels = xs
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < class_of_level.len() {
                Ok(v as usize)
            } else {
                Err(Error::InvalidArgument(format!(
                    "`{x}` value {v} is not a level in 0..{}",
                    class_of_level.len()
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<usize> = levels.iter().map(|&l| class_of_level[l]).collect();
    let y = &d.outcome()?.values;
    let treat = &d.treatment()?.values;
    let ate_x = stratified_ate(y, treat, &levels)?;
    let ate_m = stratified_ate(y, treat, &classes)?;
    let gap = (ate_m - ate_x).abs();
    let max_discrepancy = true_tau.map_or(gap, |tau| gap.max((ate_x - tau).abs()).max((ate_m - tau).abs()));
    Ok(UnconfoundednessReport {
        ate_x,
        ate_m,
        true_tau,
        sd_y: mean_sd(y).1,
        gap,
        max_discrepancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn design_of(cols: &[(&str, Vec<f64>)]) -> Design {
        let mut d = Design::new(cols[0].1.len());
        for (name, v) in cols {
            d.push(*name, v.clone()).unwrap();
        }
        d
    }

    /// Normal equations solved by Gauss-Jordan elimination with partial pivoting.
    fn gauss_oracle(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let k = x.len();
        let mut a: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut row: Vec<f64> = (0..k)
                    .map(|j| x[i].iter().zip(&x[j]).map(|(p, q)| p * q).sum())
                    .collect();
                row.push(x[i].iter().zip(y).map(|(p, q)| p * q).sum());
                row
            })
            .collect();
        for c in 0..k {
            let piv = (c..k).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for r in 0..k {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for j in c..=k {
                        a[r][j] -= f * a[c][j];
                    }
                }
            }
        }
        (0..k).map(|i| a[i][k] / a[i][i]).collect()
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (1..=6).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let mut d = Design::with_intercept(6);
        d.push("x", x).unwrap();
        let r = ols(&y, &d).unwrap();
        assert!(r.coefficients[0].coef.abs() < 1e-12);
        assert!((r.coefficients[1].coef - 2.0).abs() < 1e-12);
        assert_eq!(r.r_squared, 1.0);
    }

    #[test]
    fn agrees_with_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..20).map(|_| normal(&mut rng)).collect()).collect();
            let y: Vec<f64> = (0..20).map(|_| normal(&mut rng)).collect();
            let d = design_of(&[("a", cols[0].clone()), ("b", cols[1].clone()), ("c", cols[2].clone())]);
            let r = ols(&y, &d).unwrap();
            for (got, want) in r.coef().iter().zip(gauss_oracle(&cols, &y)) {
                assert!((got - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn classical_errors_match_textbook_formula() {
        // simple regression: se(slope) = s / sqrt(sum (x - xbar)^2)
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0];
        let y = vec![1.2, 1.9, 3.4, 3.8, 5.1, 7.3];
        let mut d = Design::with_intercept(6);
        d.push("x", x.clone()).unwrap();
        let r = ols(&y, &d).unwrap();
        let xbar = x.iter().sum::<f64>() / 6.0;
        let sxx: f64 = x.iter().map(|v| (v - xbar).powi(2)).sum();
        let s2 = r.residuals.iter().map(|e| e * e).sum::<f64>() / 4.0;
        let slope = &r.coefficients[1];
        assert!((slope.se - (s2 / sxx).sqrt()).abs() < 1e-12);
        assert!((slope.t.unwrap() - slope.coef / slope.se).abs() < 1e-12);
        let p = slope.p.unwrap();
        assert!(p > 0.0 && p < 1e-3);
        assert_eq!(r.df, 4);
    }

    #[test]
    fn p_value_of_known_quantile() {
        // t = 2.776445 is the two-sided 5% critical value at 4 degrees of freedom
        let dist = StudentsT::new(0.0, 1.0, 4.0).unwrap();
        assert!((2.0 * dist.sf(2.776445) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn robust_errors_hc1() {
        let x = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let y = vec![1.0, 2.0, 3.0, 2.0, 6.0, 10.0];
        let mut d = Design::with_intercept(6);
        d.push("g", x).unwrap();
        let r = ols_with(&y, &d, true).unwrap();
        // two-group case: HC0 var of the gap is sum e^2 / n_g^2 per group
        let hc0: f64 = 2.0 / 9.0 + 32.0 / 9.0;
        assert!((r.coefficients[1].se - (hc0 * 6.0 / 4.0).sqrt()).abs() < 1e-12);
        assert!(r.robust);
    }

    #[test]
    fn rank_deficiency_is_named() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let d = design_of(&[
            ("a", a.clone()),
            ("b", vec![0.0, 1.0, 0.0, 1.0]),
            ("twice_a", a.iter().map(|v| 2.0 * v).collect()),
        ]);
        assert!(
            matches!(ols(&[1.0, 2.0, 3.0, 4.0], &d), Err(Error::RankDeficient(c)) if c == vec!["twice_a".to_string()])
        );
        let d = design_of(&[("a", a.clone()), ("b", a.clone())]);
        assert!(ols(&[1.0], &Design::with_intercept(1)).is_err());
        assert!(ols(&[1.0, 2.0, 3.0, 4.0], &d).is_err());
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200;
        let mut d = Design::with_intercept(n);
        for j in 0..4 {
            d.push(format!("x{j}"), (0..n).map(|_| normal(&mut rng)).collect())
                .unwrap();
        }
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng) * 3.0 + 1.0).collect();
        let r = ols(&y, &d).unwrap();
        for j in 0..d.n_cols() {
            let dot: f64 = d.column(j).iter().zip(&r.residuals).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-6 * n as f64);
        }
    }

    fn dataset(cols: Vec<(&str, Role, Vec<f64>)>) -> Dataset {
        Dataset::new(cols.into_iter().map(|(n, r, v)| (n.to_string(), r, v)).collect()).unwrap()
    }

    #[test]
    fn interaction_design_uses_strict_mean_split() {
        let d = dataset(vec![
            ("treat", Role::Treatment, vec![1.0, 0.0, 1.0, 0.0]),
            ("age", Role::Covariate, vec![20.0, 30.0, 25.0, 35.0]),
            ("re78", Role::Outcome, vec![1.0, 2.0, 3.0, 4.0]),
        ]);
        let design = interaction_design(&d, "treat", "age").unwrap();
        assert_eq!(design.names(), ["Intercept", "treat", "age_dummy", "age_dummy_x_treat"]);
        // mean 27.5: 30 and 35 are above, 25 is not
        assert_eq!(design.column(2), [0.0, 1.0, 0.0, 1.0]);
        assert_eq!(design.column(3), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn interaction_regression_recovers_cell_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let treat: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let age: Vec<f64> = (0..n).map(|_| rng.random_range(18.0..60.0)).collect();
        let mean = age.iter().sum::<f64>() / n as f64;
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let old = f64::from(u8::from(age[i] > mean));
                10.0 + 2.0 * treat[i] - 3.0 * old + 4.0 * old * treat[i]
            })
            .collect();
        let d = dataset(vec![
            ("treat", Role::Treatment, treat),
            ("age", Role::Covariate, age),
            ("y", Role::Outcome, y),
        ]);
        let r = interaction_regression(&d, "age").unwrap();
        for (got, want) in r.coef().iter().zip([10.0, 2.0, -3.0, 4.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            serde_json::from_str::<OlsResult>(&json).unwrap().coefficients,
            r.coefficients
        );
    }

    #[test]
    fn indicators() {
        let p = Partition::from_labels(vec![0, 1, 2, 1]).unwrap();
        let m = macrostate_indicators(&p);
        assert_eq!(m.row(1), [0.0, 1.0]);
        assert_eq!(m.row(2), [0.0, 0.0]);
        for i in 0..4 {
            let s: f64 = m.row(i).iter().sum();
            assert_eq!(s == 0.0, p.labels()[i] == 2);
        }
        let one = macrostate_indicators(&Partition::from_labels(vec![0, 0]).unwrap());
        assert_eq!(one.width(), 0);
        assert!(one.columns().is_empty());
    }

    #[test]
    fn indicators_and_full_dummies_fit_the_same() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let p = Partition::from_labels(labels.clone()).unwrap();
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let m = macrostate_indicators(&p);
        let mut reduced = Design::with_intercept(n);
        for (name, c) in m.names().into_iter().zip(m.columns()) {
            reduced.push(name, c).unwrap();
        }
        let mut full = Design::new(n);
        for c in 0..3 {
            full.push(
                format!("d{c}"),
                labels.iter().map(|&l| f64::from(u8::from(l == c))).collect(),
            )
            .unwrap();
        }
        let a = ols(&y, &reduced).unwrap();
        let b = ols(&y, &full).unwrap();
        for (u, v) in a.fitted.iter().zip(&b.fitted) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn cluster_regression_cases() {
        let n = 12;
        let post: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 3 == 1))).collect();
        let times: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 3 == 2))).collect();
        let labels: Vec<usize> = (0..n).map(|i| i / 6).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| labels[i] as f64 * 5.0 + post[i] - 2.0 * times[i])
            .collect();
        let d = dataset(vec![
            ("post", Role::Covariate, post.clone()),
            ("times", Role::Covariate, times.clone()),
            ("y", Role::Outcome, y.clone()),
        ]);
        let p = Partition::from_labels(labels).unwrap();
        let r = cluster_indicator_regression(&d, &p, &["post", "times"], false).unwrap();
        assert_eq!(r.r_squared, 1.0);
        assert!((r.get("post").unwrap().coef - 1.0).abs() < 1e-10);
        assert!((r.get("times").unwrap().coef + 2.0).abs() < 1e-10);

        let one = Partition::from_labels(vec![0; n]).unwrap();
        let a = cluster_indicator_regression(&d, &one, &["post", "times"], false).unwrap();
        let mut plain = Design::with_intercept(n);
        plain.push("post", post.clone()).unwrap();
        plain.push("times", times).unwrap();
        assert_eq!(a.coef(), ols(&y, &plain).unwrap().coef());

        let same = Partition::from_labels(post.iter().map(|&v| v as usize).collect()).unwrap();
        assert!(matches!(
            cluster_indicator_regression(&d, &same, &["post"], false),
            Err(Error::RankDeficient(_))
        ));
        assert!(cluster_indicator_regression(&d, &p, &["y"], false).is_err());
    }

    fn het_data(strata: &[f64], treat: &[f64], labels: Vec<usize>) -> (Dataset, Partition) {
        let d = dataset(vec![
            ("x", Role::Covariate, strata.to_vec()),
            ("d", Role::Treatment, treat.to_vec()),
            ("y", Role::Outcome, vec![0.0; strata.len()]),
        ]);
        (d, Partition::from_labels(labels).unwrap())
    }

    #[test]
    fn heterogeneity_cases() {
        let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let t = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];

        let (d, p) = het_data(&x, &t, vec![0; 8]);
        let r = heterogeneity_flags(&d, &p, "x", true).unwrap();
        assert!(!r.heterogeneous);

        // stratum 0 co-clustered, stratum 1 split by treatment
        let (d, p) = het_data(&x, &t, vec![0, 0, 0, 0, 1, 1, 2, 2]);
        let r = heterogeneity_flags(&d, &p, "x", true).unwrap();
        assert_eq!(r.case_one, Some((0.0, 1.0)));
        assert!(r.heterogeneous);
        assert_eq!(r.label, HeterogeneityLabel::Causal);

        // treated share a cluster across strata, controls differ
        let (d, p) = het_data(&x, &t, vec![0, 0, 1, 1, 0, 0, 2, 2]);
        let r = heterogeneity_flags(&d, &p, "x", false).unwrap();
        assert_eq!(r.case_two, Some((0.0, 1.0)));
        assert_eq!(r.case_one, None);
        assert_eq!(r.label, HeterogeneityLabel::PotentiallySelectionBiased);

        // majority vote decides: one stray control row does not move the vote
        let (d, p) = het_data(&x, &t, vec![0, 0, 0, 1, 2, 2, 3, 3]);
        let r = heterogeneity_flags(&d, &p, "x", true).unwrap();
        assert_eq!(r.strata[0].control_cluster, 0);
        assert!(r.strata[0].co_clustered);

        let (d, p) = het_data(&[0.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 1.0, 1.0], vec![0, 0, 1, 1]);
        let r = heterogeneity_flags(&d, &p, "x", true).unwrap();
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.strata.len(), 1);
    }

    fn logit_data(seed: u64, n: usize, b: [f64; 3]) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let t: Vec<f64> = (0..n)
            .map(|i| {
                f64::from(u8::from(
                    rng.random::<f64>() < sigmoid(b[0] + b[1] * x1[i] + b[2] * x2[i]),
                ))
            })
            .collect();
        dataset(vec![
            ("x1", Role::Covariate, x1),
            ("x2", Role::Covariate, x2),
            ("t", Role::Treatment, t),
        ])
    }

    #[test]
    fn propensity_recovers_coefficients() {
        let truth = [-0.5, 1.0, 0.3];
        let d = logit_data(11, 5000, truth);
        let m = propensity_fit(&d, &["x1", "x2"]).unwrap();
        assert!(m.converged);
        for j in 0..3 {
            assert!(
                (m.coef[j] - truth[j]).abs() < 2.0 * m.se[j],
                "coef {j}: {} vs {}",
                m.coef[j],
                truth[j]
            );
        }
        assert!(m.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn propensity_without_signal_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 2000;
        let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let t: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 4 == 0))).collect();
        let d = dataset(vec![("x", Role::Covariate, x), ("t", Role::Treatment, t)]);
        let m = propensity_fit(&d, &["x"]).unwrap();
        assert!(m.scores.iter().all(|s| (s - 0.25).abs() < 0.05));
        let intercept_only = propensity_fit(&d, &[]).unwrap();
        assert!(intercept_only.scores.iter().all(|s| (s - 0.25).abs() < 1e-12));
    }

    #[test]
    fn separation_is_detected() {
        let x: Vec<f64> = (0..40).map(|i| f64::from(u8::from(i < 15))).collect();
        let d = dataset(vec![("x", Role::Covariate, x.clone()), ("t", Role::Treatment, x)]);
        assert!(matches!(propensity_fit(&d, &["x"]), Err(Error::Separation(c)) if c == vec!["x".to_string()]));
        // quasi-complete: x = 1 always treated, x = 0 mixed
        let x: Vec<f64> = (0..40).map(|i| f64::from(u8::from(i < 15))).collect();
        let t: Vec<f64> = (0..40).map(|i| f64::from(u8::from(i < 15 || i % 2 == 0))).collect();
        let d = dataset(vec![("x", Role::Covariate, x), ("t", Role::Treatment, t)]);
        assert!(matches!(propensity_fit(&d, &["x"]), Err(Error::Separation(_))));
        let all = dataset(vec![
            ("x", Role::Covariate, vec![0.0, 1.0]),
            ("t", Role::Treatment, vec![1.0, 1.0]),
        ]);
        assert!(matches!(propensity_fit(&all, &["x"]), Err(Error::NoUnits("control"))));
    }

    #[test]
    fn matching_examples() {
        let m = nn_match(&[0.5, 0.4, 0.8], &[1.0, 0.0, 0.0], None).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
        let m = nn_match(&[0.5, 0.4, 0.8], &[1.0, 0.0, 0.0], Some(0.01)).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_treated, vec![0]);
        // equidistant controls: the lower row index wins
        let m = nn_match(&[0.6, 0.5, 0.7], &[0.0, 1.0, 0.0], None).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        let m = nn_match(&[0.25, 0.5, 0.75], &[0.0, 1.0, 0.0], None).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        // more treated than controls
        let m = nn_match(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0], None).unwrap();
        assert_eq!(m.pairs, vec![(0, 2)]);
        assert_eq!(m.unmatched_treated, vec![1]);
    }

    /// Quadratic greedy matcher written without ordered sets.
    fn greedy_oracle(scores: &[f64], treat: &[f64], caliper: Option<f64>) -> Vec<(usize, usize)> {
        let mut used = vec![false; scores.len()];
        let mut order: Vec<usize> = (0..scores.len()).filter(|&i| treat[i] == 1.0).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut pairs = Vec::new();
        for t in order {
            let mut best: Option<usize> = None;
            for c in 0..scores.len() {
                if treat[c] != 0.0 || used[c] {
                    continue;
                }
                let gap = (scores[c] - scores[t]).abs();
                if best.is_none_or(|b| gap < (scores[b] - scores[t]).abs()) {
                    best = Some(c);
                }
            }
            if let Some(c) = best {
                if caliper.is_none_or(|cal| (scores[c] - scores[t]).abs() <= cal) {
                    used[c] = true;
                    pairs.push((t, c));
                }
            }
        }
        pairs
    }

    #[test]
    fn matching_agrees_with_quadratic_oracle() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            // coarse scores force ties
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..12u8)) / 12.0).collect();
            let treat: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
            let caliper = (seed % 2 == 0).then_some(0.1);
            let m = nn_match(&scores, &treat, caliper).unwrap();
            assert_eq!(m.pairs, greedy_oracle(&scores, &treat, caliper), "seed {seed}");
        }
    }

    #[test]
    fn balance_examples() {
        let d = dataset(vec![
            ("x", Role::Covariate, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]),
            ("t", Role::Treatment, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
        ]);
        let m = nn_match(&[0.1, 0.2, 0.3, 0.1, 0.2, 0.3], &d.treatment().unwrap().values, None).unwrap();
        let b = balance_report(&d, &m, &["x"]).unwrap();
        assert_eq!(b.covariates[0].smd_before, 0.0);
        assert_eq!(b.covariates[0].smd_after, 0.0);

        // shift of 2 with unit variances in both arms
        let (smd, flag) = standardized_mean_difference(&[2.0, 3.0, 4.0], &[0.0, 1.0, 2.0]);
        assert_eq!((smd, flag), (2.0, false));
        let (smd, flag) = standardized_mean_difference(&[1.0, 1.0], &[1.0, 1.0]);
        assert_eq!((smd, flag), (0.0, true));
    }

    #[test]
    fn matching_improves_balance() {
        let mut improved = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 600;
            let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
            let t: Vec<f64> = x
                .iter()
                .map(|&v| f64::from(u8::from(rng.random::<f64>() < sigmoid(-1.0 + v))))
                .collect();
            let d = dataset(vec![("x", Role::Covariate, x), ("t", Role::Treatment, t)]);
            let (_, m) = propensity_match(&d, &["x"], None).unwrap();
            let b = balance_report(&d, &m, &["x"]).unwrap();
            if b.covariates[0].smd_after.abs() <= b.covariates[0].smd_before.abs() {
                improved += 1;
            }
        }
        assert!(improved >= 18, "{improved}/20");
    }

    #[test]
    fn bootstrap_constant_effect() {
        let n = 10;
        let t: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i < 5))).collect();
        let base: Vec<f64> = (0..n).map(|i| (i % 5) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| base[i] + 2.5 * t[i]).collect();
        let d = dataset(vec![("t", Role::Treatment, t.clone()), ("y", Role::Outcome, y)]);
        let m = nn_match(&base, &t, None).unwrap();
        let e = ate_bootstrap(&d, &m, "y", 200, 1).unwrap();
        assert_eq!(e.ate, 2.5);
        assert_eq!(e.se, 0.0);
        assert!(ate_bootstrap(&d, &m, "y", 99, 1).is_err());
        let empty = MatchResult {
            pairs: vec![],
            unmatched_treated: vec![],
            caliper: None,
            scores: vec![],
        };
        assert!(matches!(ate_bootstrap(&d, &empty, "y", 100, 1), Err(Error::NoUnits(_))));
    }

    fn tau_data(seed: u64, n: usize, tau: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let t: Vec<f64> = x
            .iter()
            .map(|&v| f64::from(u8::from(rng.random::<f64>() < sigmoid(-1.0 + 0.5 * v))))
            .collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] + tau * t[i] + normal(&mut rng)).collect();
        dataset(vec![
            ("x", Role::Covariate, x),
            ("t", Role::Treatment, t),
            ("y", Role::Outcome, y),
        ])
    }

    #[test]
    fn bootstrap_covers_known_effect() {
        let d = tau_data(21, 2000, 1.0);
        let (_, m) = propensity_match(&d, &["x"], None).unwrap();
        let e = ate_bootstrap(&d, &m, "y", 500, 7).unwrap();
        assert!((e.ate - 1.0).abs() < 3.0 * e.se, "{} +- {}", e.ate, e.se);
        let again = ate_bootstrap(&d, &m, "y", 500, 7).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn bootstrap_se_stabilizes() {
        let d = tau_data(22, 1000, 1.0);
        let (_, m) = propensity_match(&d, &["x"], None).unwrap();
        let small = ate_bootstrap(&d, &m, "y", 500, 3).unwrap();
        let large = ate_bootstrap(&d, &m, "y", 2000, 3).unwrap();
        assert!((small.se - large.se).abs() / large.se < 0.1);
    }

    #[test]
    fn stratified_effects() {
        let y = [1.0, 3.0, 10.0, 14.0];
        let t = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(stratified_ate(&y, &t, &[0, 0, 1, 1]).unwrap(), 3.0);
        assert!(matches!(
            stratified_ate(&y, &t, &[0, 1, 1, 1]),
            Err(Error::EmptyStratum { .. })
        ));
    }

    #[test]
    fn merging_identical_levels_preserves_the_effect() {
        // levels 0 and 1 share P(Y | X); level 2 differs
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 20_000;
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..3u8))).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.5))).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| f64::from(u8::from(x[i] == 2.0)) * 3.0 + 1.5 * t[i] + normal(&mut rng))
            .collect();
        let d = dataset(vec![
            ("x", Role::Covariate, x),
            ("t", Role::Treatment, t),
            ("y", Role::Outcome, y),
        ]);
        let r = unconfoundedness_preservation_test(&d, "x", &[0, 0, 1], Some(1.5)).unwrap();
        assert!(r.gap < 0.02 * r.sd_y);
        assert!((r.ate_x - 1.5).abs() < 0.1);
        assert!(unconfoundedness_preservation_test(&d, "x", &[0, 0], None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matching_never_reuses_controls(seed in 0u64..10_000, n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let treat: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
            let m = nn_match(&scores, &treat, None).unwrap();
            let controls: BTreeSet<usize> = m.pairs.iter().map(|p| p.1).collect();
            prop_assert_eq!(controls.len(), m.pairs.len());
            prop_assert!(m.pairs.iter().all(|&(t, c)| treat[t] == 1.0 && treat[c] == 0.0));
            let nt = treat.iter().filter(|&&v| v == 1.0).count();
            prop_assert_eq!(m.pairs.len(), nt.min(n - nt));
        }

        #[test]
        fn indicator_rows_are_one_hot(labels in proptest::collection::vec(0usize..5, 1..40)) {
            let p = Partition::compact(&labels);
            let m = macrostate_indicators(&p);
            for i in 0..labels.len() {
                let s: f64 = m.row(i).iter().sum();
                prop_assert!(s == 0.0 || s == 1.0);
                prop_assert_eq!(s == 0.0, p.labels()[i] == p.k() - 1);
            }
        }
    }
}
