pub mod cct;
pub mod matching;
pub mod pipeline;
pub mod regularity;
pub mod sweep;

use anyhow::Context;
use cfl::binning::{assign_bins, equal_width_bins, quantile_bins, BinEdges, BinLabels, BinScheme};
use cfl::clustering::{KMeans, KMeansFit};
use cfl::data::{load_csv, Dataset, Role, RoleMap};
use cfl::density::{
    fit_frequency_table, fit_softmax_classifier, predict_cond_dist, CondDistMatrix, SoftmaxClassifierConfig,
};
use sha2::{Digest, Sha256};

use crate::config::{Estimator, RunConfig};

/// Seed for one stage, derived from the master seed and a stage label so
/// stages never share a random stream.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let path = cfg.input()?;
    let d = load_csv(path, &cfg.roles).context("stage `load`")?;
    if d.n() == 0 {
        anyhow::bail!("stage `load`: no usable rows in {}", path.display());
    }
    Ok(d)
}

pub struct Binned {
    pub edges: BinEdges,
    pub labels: BinLabels,
}

pub fn bin_outcome(d: &Dataset, scheme: BinScheme, m: usize) -> anyhow::Result<Binned> {
    let y = &d.outcome().context("stage `bin`")?.values;
    let edges = match scheme {
        BinScheme::EqualWidth => equal_width_bins(y, m),
        BinScheme::Quantile => quantile_bins(y, m),
    }
    .context("stage `bin`")?;
    let labels = assign_bins(y, &edges, false).context("stage `bin`")?;
    Ok(Binned { edges, labels })
}

pub struct Density {
    pub model: serde_json::Value,
    pub cond: CondDistMatrix,
}

/// The rows the estimator sees: the treatment becomes one more input when
/// configured and present.
fn estimator_inputs(d: &Dataset, cfg: &RunConfig) -> anyhow::Result<Dataset> {
    match d.treatment() {
        Ok(t) if cfg.density.treatment_as_input => {
            Ok(d.with_roles(&RoleMap::new().with(t.name.clone(), Role::Covariate))?)
        }
        _ => Ok(d.clone()),
    }
}

pub fn fit_density(d: &Dataset, labels: &BinLabels, cfg: &RunConfig, seed: u64) -> anyhow::Result<Density> {
    let dc = &cfg.density;
    let d = &estimator_inputs(d, cfg).context("stage `fit`")?;
    let (model, cond) = match dc.estimator {
        Estimator::Softmax => {
            let mut c = SoftmaxClassifierConfig::for_covariates(d.covariate_names().len(), sub_seed(seed, "density"));
            if let Some(h) = &dc.hidden {
                c.hidden = h.clone();
            }
            c.epochs = dc.epochs.unwrap_or(c.epochs);
            c.learning_rate = dc.learning_rate.unwrap_or(c.learning_rate);
            c.batch_size = dc.batch_size.unwrap_or(c.batch_size);
            c.l2 = dc.l2.unwrap_or(c.l2);
            let est = fit_softmax_classifier(d, labels, &c).context("stage `fit`")?;
            let cond = predict_cond_dist(&est, d).context("stage `predict`")?;
            (serde_json::to_value(&est)?, cond)
        }
        Estimator::FrequencyTable => {
            let est = fit_frequency_table(d, labels).context("stage `fit`")?;
            let cond = predict_cond_dist(&est, d).context("stage `predict`")?;
            (serde_json::to_value(&est)?, cond)
        }
    };
    Ok(Density { model, cond })
}

pub fn cluster(cond: &CondDistMatrix, k: usize, restarts: usize, seed: u64) -> anyhow::Result<KMeansFit> {
    let rows: Vec<&[f64]> = cond.rows().collect();
    KMeans::new(k, sub_seed(seed, "kmeans"))
        .restarts(restarts)
        .fit(&rows)
        .with_context(|| format!("stage `cluster` (k = {k})"))
}

pub fn covariate_list(d: &Dataset, configured: &Option<Vec<String>>) -> Vec<String> {
    configured.clone().unwrap_or_else(|| d.covariate_names())
}
