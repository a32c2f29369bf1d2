//! Conditional distribution of the outcome bin given covariates.
//!
//! Two estimators share the [`ConditionalEstimator`] trait: a small
//! feed-forward softmax classifier trained by seeded mini-batch gradient
//! descent, and an exact frequency table for fully discrete covariates
//! that serves as its oracle.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binning::BinLabels;
use crate::data::{ColumnKind, Dataset};
use crate::error::{Error, Result};

/// Row-stochastic `n x m` matrix: row `i` is the estimated distribution of
/// the outcome bin for row `i`'s covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondDistMatrix {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl CondDistMatrix {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    pub fn new(n: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * m {
            return Err(Error::LengthMismatch {
                what: "conditional distribution matrix",
                expected: n * m,
                got: data.len(),
            });
        }
        if m == 0 {
            return Err(Error::InvalidArgument("zero bins".into()));
        }
        for (i, row) in data.chunks(m).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::InvalidDistribution(format!(
                    "row {i} is not a probability vector: {row:?}"
                )));
            }
        }
        Ok(Self { n, m, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(rows.len(), m, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.m)
    }
}

pub trait ConditionalEstimator {
    /// Number of outcome bins.
    fn n_bins(&self) -> usize;

    /// Covariate columns the estimator reads, in order.
    fn covariates(&self) -> &[String];

    fn predict(&self, d: &Dataset) -> Result<CondDistMatrix>;
}

pub fn predict_cond_dist<E: ConditionalEstimator + ?Sized>(est: &E, d: &Dataset) -> Result<CondDistMatrix> {
    est.predict(d)
}

fn covariate_rows(d: &Dataset, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let cols = names
        .iter()
        .map(|name| {
            d.values(name)
                .map_err(|_| Error::SchemaMismatch(format!("covariate `{name}` missing from dataset")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..d.n()).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

fn check_labels(d: &Dataset, labels: &BinLabels) -> Result<()> {
    if labels.len() != d.n() {
        return Err(Error::LengthMismatch {
            what: "bin labels",
            expected: d.n(),
            got: labels.len(),
        });
    }
    if labels.counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidArgument(
            "at least two distinct outcome bins must be present".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifierConfig {
    /// Hidden layer widths; empty means multinomial logistic regression.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl SoftmaxClassifierConfig {
    /// No hidden layer for up to three covariates, one layer of 16 otherwise.
    pub fn for_covariates(n_covariates: usize, seed: u64) -> Self {
        Self {
            hidden: if n_covariates <= 3 { vec![] } else { vec![16] },
            learning_rate: 0.05,
            epochs: 500,
            batch_size: 64,
            seed,
            l2: 1e-4,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.epochs > 0
            && self.batch_size > 0
            && self.l2 >= 0.0
            && self.hidden.iter().all(|&h| h > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad classifier config: {self:?}")))
        }
    }
}

/// Scaling applied to each input column: binary columns pass through,
/// everything else is standardized with the training mean and sample sd.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InputScale {
    mean: f64,
    sd: f64,
}

/// Fully connected network, tanh hidden units, softmax output.
/// Parameters are flat: per layer, an `out x in` weight block (row-major)
/// followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { sizes, params }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn is_weight(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.params.len());
        for w in self.sizes.windows(2) {
            out.extend(std::iter::repeat_n(true, w[0] * w[1]));
            out.extend(std::iter::repeat_n(false, w[1]));
        }
        out
    }

    /// Activations of every layer, input first, softmax output last.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let mut z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    bias[o]
                        + weights[o * fan_in..(o + 1) * fan_in]
                            .iter()
                            .zip(input)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            if l + 1 == layers {
                softmax_in_place(&mut z);
            } else {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict_one(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).pop().unwrap()
    }

    /// Mean cross-entropy over the batch plus `l2 / 2 * sum(w^2)` over
    /// weights (not biases), and its gradient.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[usize], l2: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.forward(x);
            let out = &acts[layers];
            loss -= out[y].max(f64::MIN_POSITIVE).ln();
            // dL/dz for the softmax layer
            let mut delta: Vec<f64> = out.clone();
            delta[y] -= 1.0;
            for l in (0..layers).rev() {
                let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
                let o = offsets[l];
                let input = &acts[l];
                for j in 0..fan_out {
                    for i in 0..fan_in {
                        grad[o + j * fan_in + i] += delta[j] * input[i];
                    }
                    grad[o + fan_in * fan_out + j] += delta[j];
                }
                if l > 0 {
                    let weights = &self.params[o..o + fan_in * fan_out];
                    delta = (0..fan_in)
                        .map(|i| {
                            let back: f64 = (0..fan_out).map(|j| weights[j * fan_in + i] * delta[j]).sum();
                            back * (1.0 - input[i] * input[i])
                        })
                        .collect();
                }
            }
        }
        let scale = 1.0 / xs.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        loss *= scale;
        if l2 > 0.0 {
            for ((g, p), w) in grad.iter_mut().zip(&self.params).zip(self.is_weight()) {
                if w {
                    *g += l2 * p;
                    loss += 0.5 * l2 * p * p;
                }
            }
        }
        (loss, grad)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Fitted softmax classifier over outcome bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    pub config: SoftmaxClassifierConfig,
    covariates: Vec<String>,
    scales: Vec<Option<InputScale>>,
    network: Mlp,
    /// Mean cross-entropy on the training rows after the last epoch.
    pub training_loss: f64,
}

impl SoftmaxClassifier {
    pub fn network(&self) -> &Mlp {
        &self.network
    }

    fn encode(&self, row: &mut [f64]) {
        for (v, s) in row.iter_mut().zip(&self.scales) {
            if let Some(s) = s {
                *v = (*v - s.mean) / s.sd;
            }
        }
    }
}

/// Trains a softmax classifier of the bin labels on all covariate columns.
///
/// Initialization and mini-batch shuffling draw from two separate ChaCha
/// streams of `cfg.seed`, so a fit is a pure function of its inputs.
pub fn fit_softmax_classifier(
    d: &Dataset,
    labels: &BinLabels,
    cfg: &SoftmaxClassifierConfig,
) -> Result<SoftmaxClassifier> {
    cfg.validate()?;
    check_labels(d, labels)?;
    let covariates = d.covariate_names();
    let mut rows = covariate_rows(d, &covariates)?;

    let scales: Vec<Option<InputScale>> = d
        .covariates()
        .map(|c| {
            if c.kind == ColumnKind::Binary {
                return None;
            }
            let (mean, sd) = crate::data::mean_sd(&c.values);
            (sd > 0.0).then_some(InputScale { mean, sd })
        })
        .collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut sizes = vec![covariates.len()];
    sizes.extend(&cfg.hidden);
    sizes.push(labels.m);
    let mut model = SoftmaxClassifier {
        config: cfg.clone(),
        covariates,
        scales,
        network: Mlp::new(sizes, &mut init_rng),
        training_loss: f64::NAN,
    };
    for row in rows.iter_mut() {
        model.encode(row);
    }

    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| rows[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels.labels[i]).collect();
            let (loss, grad) = model.network.loss_and_gradient(&xs, &ys, cfg.l2);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    learning_rate: cfg.learning_rate,
                    loss,
                });
            }
            for (p, g) in model.network.params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }

    let xs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let (loss, _) = model.network.loss_and_gradient(&xs, &labels.labels, 0.0);
    if !loss.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            learning_rate: cfg.learning_rate,
            loss,
        });
    }
    model.training_loss = loss;
    Ok(model)
}

impl ConditionalEstimator for SoftmaxClassifier {
    fn n_bins(&self) -> usize {
        *self.network.sizes.last().unwrap()
    }

    fn covariates(&self) -> &[String] {
        &self.covariates
    }

    fn predict(&self, d: &Dataset) -> Result<CondDistMatrix> {
        let mut rows = covariate_rows(d, &self.covariates)?;
        let mut data = Vec::with_capacity(rows.len() * self.n_bins());
        for row in rows.iter_mut() {
            self.encode(row);
            data.extend(self.network.predict_one(row));
        }
        CondDistMatrix::new(rows.len(), self.n_bins(), data)
    }
}

fn key_of(row: &[f64]) -> Vec<u64> {
    // +0.0 folds -0.0 into 0.0
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Empirical `P(bin | x)` for every observed covariate combination.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    covariates: Vec<String>,
    m: usize,
    cells: BTreeMap<Vec<u64>, Vec<usize>>,
}

#[derive(Serialize)]
struct FrequencyCell {
    covariates: Vec<f64>,
    counts: Vec<usize>,
}

impl Serialize for FrequencyTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            covariates: &'a [String],
            m: usize,
            cells: Vec<FrequencyCell>,
        }
        Repr {
            covariates: &self.covariates,
            m: self.m,
            cells: self
                .cells
                .iter()
                .map(|(k, c)| FrequencyCell {
                    covariates: k.iter().map(|b| f64::from_bits(*b)).collect(),
                    counts: c.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl FrequencyTable {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let counts = self
            .cells
            .get(&key_of(x))
            .ok_or_else(|| Error::UnseenCovariates(x.to_vec()))?;
        let total: usize = counts.iter().sum();
        Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }
}

pub fn fit_frequency_table(d: &Dataset, labels: &BinLabels) -> Result<FrequencyTable> {
    if labels.len() != d.n() {
        return Err(Error::LengthMismatch {
            what: "bin labels",
            expected: d.n(),
            got: labels.len(),
        });
    }
    let covariates = d.covariate_names();
    let rows = covariate_rows(d, &covariates)?;
    let mut cells: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for (row, &y) in rows.iter().zip(&labels.labels) {
        cells.entry(key_of(row)).or_insert_with(|| vec![0; labels.m])[y] += 1;
    }
    Ok(FrequencyTable {
        covariates,
        m: labels.m,
        cells,
    })
}

impl ConditionalEstimator for FrequencyTable {
    fn n_bins(&self) -> usize {
        self.m
    }

    fn covariates(&self) -> &[String] {
        &self.covariates
    }

    fn predict(&self, d: &Dataset) -> Result<CondDistMatrix> {
        let rows = covariate_rows(d, &self.covariates)?;
        let mut data = Vec::with_capacity(rows.len() * self.m);
        for row in &rows {
            data.extend(self.probabilities(row)?);
        }
        CondDistMatrix::new(rows.len(), self.m, data)
    }
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
