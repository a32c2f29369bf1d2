//! Bin-count sweep: for each requested bin count, fit and cluster, then
//! report the smallest treated share across clusters.

use anyhow::Context;
use cfl::clustering::min_treated_fraction;
use serde::Serialize;

use super::{bin_outcome, cluster, fit_density, load_data};
use crate::artifacts::{fmt_f64, ArtifactWriter};
use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub bins: usize,
    pub realized_bins: usize,
    pub k: usize,
    /// Smallest treated share over the clusters, in `[0, 1]`.
    pub min_pct_treated: f64,
}

/// `cfl bin-sweep`.
pub fn command(cfg: &RunConfig, seed: u64, w: &mut ArtifactWriter) -> anyhow::Result<()> {
    let d = load_data(cfg)?;
    w.stage_done("load");
    let bins = if cfg.sweep.bins.is_empty() {
        vec![cfg.binning.bins]
    } else {
        cfg.sweep.bins.clone()
    };
    let ks = cfg.ks()?;
    let mut rows = Vec::new();
    for &m in &bins {
        let binned = bin_outcome(&d, cfg.binning.scheme, m).with_context(|| format!("bins = {m}"))?;
        let density = fit_density(&d, &binned.labels, cfg, seed).with_context(|| format!("bins = {m}"))?;
        for &k in &ks {
            let fit = cluster(&density.cond, k, cfg.clustering.restarts, seed)?;
            let share = min_treated_fraction(&d, &fit.partition).context("stage `sweep`")?;
            rows.push(SweepRow {
                bins: m,
                realized_bins: binned.edges.m(),
                k,
                min_pct_treated: share,
            });
        }
    }
    w.stage_done("sweep");
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.bins.to_string(),
                r.realized_bins.to_string(),
                r.k.to_string(),
                fmt_f64(r.min_pct_treated),
            ]
        })
        .collect();
    w.csv(
        "bin_sweep.csv",
        &["bins", "realized_bins", "clusters", "min_pct_treated"],
        &table,
    )?;
    w.json("bin_sweep.json", &rows)?;
    Ok(())
}
