//! Macrostates as clusters of estimated conditional distributions.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::density::CondDistMatrix;
use crate::error::{Error, Result};

/// A labeling of rows into `k` non-empty macrostates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
    /// `k x m` centroids when the partition came from k-means, else empty.
    pub centroids: Vec<Vec<f64>>,
}

impl Partition {
    /// Wraps labels in `0..k`; every cluster must be non-empty.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; k];
        labels.iter().for_each(|&l| seen[l] = true);
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("cluster {empty} is empty")));
        }
        Ok(Self {
            labels,
            k,
            centroids: Vec::new(),
        })
    }

    /// Renumbers arbitrary labels in order of first appearance.
    pub fn compact(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self {
            labels,
            k: map.len(),
            centroids: Vec::new(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.labels.iter().for_each(|&l| s[l] += 1);
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    /// Writes `row,label` lines; `row_ids` maps rows back to input positions.
    pub fn write_csv<W: Write>(&self, w: W, row_ids: Option<&[usize]>) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "label"])?;
        for (i, l) in self.labels.iter().enumerate() {
            let row = row_ids.map_or(i, |ids| ids[i]);
            out.write_record([row.to_string(), l.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid move.
    pub tol: f64,
}

/// Result of the best restart.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub partition: Partition,
    /// Within-cluster sum of squares.
    pub inertia: f64,
    pub restart: usize,
    pub iterations: usize,
    /// Objective after each assignment step; non-increasing.
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn distinct_points(points: &[&[f64]]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

impl KMeans {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: 10,
            seed,
            max_iter: 300,
            tol: 1e-8,
        }
    }

    pub fn restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    /// Runs all restarts (in parallel) and keeps the lowest objective,
    /// breaking ties by restart index.
    pub fn fit(&self, points: &[&[f64]]) -> Result<KMeansFit> {
        let n = points.len();
        if self.k == 0 || self.k > n {
            return Err(Error::InvalidArgument(format!("k = {} for {n} points", self.k)));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be at least 1".into()));
        }
        let dim = points[0].len();
        if points
            .iter()
            .any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "points must be finite and of equal dimension".into(),
            ));
        }
        let distinct = distinct_points(points);
        if distinct < self.k {
            return Err(Error::TooFewDistinctPoints { k: self.k, distinct });
        }

        let fits: Vec<KMeansFit> = (0..self.restarts)
            .into_par_iter()
            .map(|r| self.run(points, r))
            .collect();
        let mut best = None::<KMeansFit>;
        for f in fits {
            if best.as_ref().is_none_or(|b| f.inertia < b.inertia) {
                best = Some(f);
            }
        }
        Ok(best.unwrap())
    }

    fn init_plus_plus(&self, points: &[&[f64]], rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let n = points.len();
        let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
        let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
        while centroids.len() < self.k {
            // at least k distinct points exist, so some weight is positive
            let pick = WeightedIndex::new(&d2).expect("positive weight").sample(rng);
            let c = points[pick].to_vec();
            for (d, p) in d2.iter_mut().zip(points) {
                *d = d.min(sq_dist(p, &c));
            }
            centroids.push(c);
        }
        centroids
    }

    fn run(&self, points: &[&[f64]], restart: usize) -> KMeansFit {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(restart as u64);
        let mut centroids = self.init_plus_plus(points, &mut rng);
        let mut trace = Vec::new();
        let mut iterations = 0;
        while iterations < self.max_iter {
            iterations += 1;
            let mut labels = assign(points, &centroids);
            reseed_empty(points, &mut labels, &mut centroids);
            trace.push(objective(points, &labels, &centroids));
            let next = means(points, &labels, self.k);
            let shift = centroids
                .iter()
                .zip(&next)
                .map(|(a, b)| sq_dist(a, b).sqrt())
                .fold(0.0, f64::max);
            centroids = next;
            if shift < self.tol {
                break;
            }
        }
        let mut labels = assign(points, &centroids);
        reseed_empty(points, &mut labels, &mut centroids);
        let centroids = means(points, &labels, self.k);
        let inertia = objective(points, &labels, &centroids);
        trace.push(inertia);
        KMeansFit {
            partition: Partition {
                labels,
                k: self.k,
                centroids,
            },
            inertia,
            restart,
            iterations,
            objective_trace: trace,
        }
    }
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids).0).collect()
}

/// Moves the point farthest from its centroid into each empty cluster,
/// never emptying a singleton. Ties go to the lowest row index.
fn reseed_empty(points: &[&[f64]], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None::<(usize, f64)>;
        for (i, p) in points.iter().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("a cluster with two or more points exists");
        labels[i] = empty;
        centroids[empty] = points[i].to_vec();
    }
}

fn means(points: &[&[f64]], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    sums
}

fn objective(points: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

/// k-means over the rows of a conditional distribution matrix.
pub fn kmeans_fit(features: &CondDistMatrix, k: usize, seed: u64, restarts: usize) -> Result<Partition> {
    let rows: Vec<&[f64]> = features.rows().collect();
    Ok(KMeans::new(k, seed).restarts(restarts).fit(&rows)?.partition)
}

/// Adjusted Rand index between two labelings of the same rows.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Local (within-cluster) versus global covariate means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub covariates: Vec<String>,
    pub sizes: Vec<usize>,
    pub global_means: Vec<f64>,
    /// `local_means[c][j]`: mean of covariate `j` in cluster `c`.
    pub local_means: Vec<Vec<f64>>,
    /// Treated share per cluster, when the dataset has a treatment column.
    pub treated_fraction: Option<Vec<f64>>,
}

impl ClusterProfile {
    /// Largest gap between the size-weighted local means and the global means.
    pub fn weighted_mean_gap(&self) -> f64 {
        let n: usize = self.sizes.iter().sum();
        (0..self.covariates.len())
            .map(|j| {
                let w: f64 = self
                    .local_means
                    .iter()
                    .zip(&self.sizes)
                    .map(|(m, &s)| m[j] * s as f64)
                    .sum::<f64>()
                    / n as f64;
                (w - self.global_means[j]).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn check_aligned(d: &Dataset, p: &Partition) -> Result<()> {
    if p.len() != d.n() {
        return Err(Error::LengthMismatch {
            what: "partition labels",
            expected: d.n(),
            got: p.len(),
        });
    }
    Ok(())
}

pub fn cluster_profile(d: &Dataset, p: &Partition, covariates: &[&str]) -> Result<ClusterProfile> {
    check_aligned(d, p)?;
    let sizes = p.sizes();
    let mut global_means = Vec::new();
    let mut local_means = vec![Vec::new(); p.k()];
    for &name in covariates {
        let v = d.values(name)?;
        global_means.push(v.iter().sum::<f64>() / v.len() as f64);
        let mut sums = vec![0.0; p.k()];
        v.iter().zip(p.labels()).for_each(|(x, &l)| sums[l] += x);
        for (c, s) in sums.into_iter().enumerate() {
            local_means[c].push(s / sizes[c] as f64);
        }
    }
    let treated_fraction = match d.treatment() {
        Ok(t) => Some(treated_shares(&t.values, p)),
        Err(_) => None,
    };
    Ok(ClusterProfile {
        covariates: covariates.iter().map(|s| s.to_string()).collect(),
        sizes,
        global_means,
        local_means,
        treated_fraction,
    })
}

fn treated_shares(treat: &[f64], p: &Partition) -> Vec<f64> {
    let sizes = p.sizes();
    let mut treated = vec![0.0; p.k()];
    treat.iter().zip(p.labels()).for_each(|(t, &l)| treated[l] += t);
    treated.iter().zip(&sizes).map(|(t, &s)| t / s as f64).collect()
}

/// Smallest per-cluster share of treated rows.
pub fn min_treated_fraction(d: &Dataset, p: &Partition) -> Result<f64> {
    check_aligned(d, p)?;
    let t = d.treatment()?;
    Ok(treated_shares(&t.values, p).into_iter().fold(f64::INFINITY, f64::min))
}
