//! Outcome discretization into right-closed bins `(a_k, a_{k+1}]`.
//!
//! The leftmost bin is closed on both ends so the minimum is not orphaned.
//! Bin indices are zero-based: a value `v` falls in bin `k` iff
//! `a_k < v <= a_{k+1}`, and `v == a_0` falls in bin 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    EqualWidth,
    Quantile,
}

/// Bin boundaries `a_0 <= a_1 < a_2 < ... < a_m`.
///
/// Only the first bin may be degenerate (`a_0 == a_1`), in which case it
/// holds the single value `a_0`. This happens for constant data and when a
/// quantile cut lands on the minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub scheme: BinScheme,
    pub edges: Vec<f64>,
    /// Number of bins asked for; `m()` is what was realized after merging ties.
    pub requested: usize,
}

impl BinEdges {
    pub fn new(scheme: BinScheme, edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidArgument("bin edges need at least two values".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("bin edges must be finite".into()));
        }
        let ok = edges[0] <= edges[1] && edges[1..].windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "bin edges must be increasing: {edges:?}"
            )));
        }
        let requested = edges.len() - 1;
        Ok(Self {
            scheme,
            edges,
            requested,
        })
    }

    /// Realized bin count.
    pub fn m(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn low(&self) -> f64 {
        self.edges[0]
    }

    pub fn high(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    /// Bin of a single value, or `None` outside `[a_0, a_m]`.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        if !(v >= self.low() && v <= self.high()) {
            return None;
        }
        let interior = &self.edges[1..self.m()];
        Some(interior.partition_point(|&e| e < v))
    }
}

/// Per-row bin index in `0..m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinLabels {
    pub labels: Vec<usize>,
    pub m: usize,
}

impl BinLabels {
    pub fn new(labels: Vec<usize>, m: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::InvalidArgument(format!("bin label {bad} not below {m}")));
        }
        Ok(Self { labels, m })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.m];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn check_values(values: &[f64], m: usize) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot bin an empty vector".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("bin count must be positive".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("values must be finite".into()));
    }
    Ok(())
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Splits `[min, max]` into `m` intervals of equal width.
pub fn equal_width_bins(values: &[f64], m: usize) -> Result<BinEdges> {
    check_values(values, m)?;
    let (lo, hi) = min_max(values);
    if lo == hi {
        return Err(Error::ZeroWidth(lo));
    }
    // (hi - lo) * k / m keeps the edges of a 2m-bin split bit-identical to
    // those of the m-bin split at even k
    let mut edges: Vec<f64> = (0..m).map(|k| lo + (hi - lo) * k as f64 / m as f64).collect();
    edges.push(hi);
    let mut out = BinEdges::new(BinScheme::EqualWidth, edges)?;
    out.requested = m;
    Ok(out)
}

/// Equal-frequency bins with upper edges at the order statistics
/// `v_(ceil(k n / m))`, `k = 1..m`. Repeated cut points are merged, so the
/// realized bin count may fall below `m`.
pub fn quantile_bins(values: &[f64], m: usize) -> Result<BinEdges> {
    check_values(values, m)?;
    let n = values.len();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "{m} quantile bins requested for {n} values"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges = vec![sorted[0]];
    for k in 1..=m {
        // 1-based rank ceil(k n / m)
        let rank = (k * n).div_ceil(m);
        let cut = sorted[rank - 1];
        let last = *edges.last().unwrap();
        if cut > last || edges.len() == 1 {
            edges.push(cut);
        }
    }
    let mut out = BinEdges::new(BinScheme::Quantile, edges)?;
    out.requested = m;
    Ok(out)
}

/// Maps each value to its bin. Values outside `[a_0, a_m]` are an error
/// unless `clamp` is set, in which case they go to the nearest end bin.
pub fn assign_bins(values: &[f64], edges: &BinEdges, clamp: bool) -> Result<BinLabels> {
    let last = edges.m() - 1;
    let labels = values
        .iter()
        .map(|&v| match edges.bin_of(v) {
            Some(k) => Ok(k),
            None if clamp && v < edges.low() => Ok(0),
            None if clamp && v > edges.high() => Ok(last),
            None => Err(Error::OutOfRange {
                value: v,
                low: edges.low(),
                high: edges.high(),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    BinLabels::new(labels, edges.m())
}
