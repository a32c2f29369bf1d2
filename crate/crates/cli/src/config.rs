//! Run configuration, read from TOML. Every section is optional; command-line
//! flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cfl::binning::BinScheme;
use cfl::data::RoleMap;
use cfl::scm::{ScmFamily, Side};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    /// Master seed. There is no clock-based fallback.
    pub seed: Option<u64>,
    #[serde(default)]
    pub roles: RoleMap,
    #[serde(default)]
    pub binning: BinningConfig,
    #[serde(default)]
    pub density: DensityConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub cct: CctSection,
    #[serde(default)]
    pub matching: MatchingConfig,
    #[serde(default)]
    pub regularity: RegularitySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinningConfig {
    pub scheme: BinScheme,
    pub bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            scheme: BinScheme::Quantile,
            bins: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Softmax,
    FrequencyTable,
}

/// Unset classifier fields fall back to the size-dependent defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub estimator: Estimator,
    /// Feeds the treatment column to the estimator next to the covariates,
    /// so that treated and control rows can land in different macrostates.
    pub treatment_as_input: bool,
    pub hidden: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub l2: Option<f64>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Softmax,
            treatment_as_input: true,
            hidden: None,
            epochs: None,
            learning_rate: None,
            batch_size: None,
            l2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KList {
    One(usize),
    Many(Vec<usize>),
}

impl KList {
    pub fn values(&self) -> Vec<usize> {
        match self {
            KList::One(k) => vec![*k],
            KList::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    pub k: KList,
    pub restarts: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: KList::One(2),
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Columns for the local-vs-global profile; all covariates when unset.
    pub profile_covariates: Option<Vec<String>>,
    /// Column drawn as a per-cluster histogram; `age` when present.
    pub histogram: Option<String>,
    /// Emits the treatment x mean-split interaction regression.
    pub interaction_moderator: Option<String>,
    /// Binary columns regressed alongside the cluster indicators.
    pub cluster_treatments: Vec<String>,
    pub robust: bool,
    /// Discrete column whose strata feed the heterogeneity flags.
    pub heterogeneity_stratum: Option<String>,
    /// Asserts that treatment was randomized.
    pub randomized: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub bins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CctSection {
    pub trials: usize,
    /// `[z, x, m]`.
    pub dims: [usize; 3],
    pub tol: f64,
    pub degenerate_margin: f64,
    pub family: ScmFamily,
    pub side: Side,
}

impl Default for CctSection {
    fn default() -> Self {
        Self {
            trials: 10_000,
            dims: [2, 4, 3],
            tol: 1e-9,
            degenerate_margin: 1e-6,
            family: ScmFamily::Unconstrained,
            side: Side::Cause,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    /// Propensity covariates; all covariates when unset.
    pub covariates: Option<Vec<String>>,
    pub caliper: Option<f64>,
    pub bootstrap: usize,
    /// Outcomes for the matched ATE; the outcome column when unset.
    pub outcomes: Option<Vec<String>>,
    /// Runs the pipeline again on the matched rows.
    pub then_pipeline: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            covariates: None,
            caliper: None,
            bootstrap: 1000,
            outcomes: None,
            then_pipeline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularitySection {
    pub eps: f64,
    pub beta: f64,
    /// Groups outcome bins into this many cells; singletons when unset.
    pub right_k: Option<usize>,
    /// Audits cells above the exact limit by sampling instead of failing.
    pub sampled_fallback: bool,
}

impl Default for RegularitySection {
    fn default() -> Self {
        Self {
            eps: 0.3,
            beta: 0.2,
            right_k: None,
            sampled_fallback: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative input paths are taken from the config file's directory
        if let (Some(input), Some(dir)) = (&cfg.input, path.parent()) {
            if input.is_relative() {
                cfg.input = Some(dir.join(input));
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.seed
            .context("no seed given: set `seed` in the config or pass --seed")
    }

    pub fn input(&self) -> anyhow::Result<&Path> {
        match &self.input {
            Some(p) => Ok(p),
            None => bail!("no input file: set `input` in the config"),
        }
    }

    pub fn ks(&self) -> anyhow::Result<Vec<usize>> {
        let ks = self.clustering.k.values();
        if ks.is_empty() || ks.contains(&0) {
            bail!("clustering.k must list positive cluster counts");
        }
        Ok(ks)
    }
}
