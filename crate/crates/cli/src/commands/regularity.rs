//! Regularity audit of the graph between distinct conditional distributions
//! (left) and outcome bins (right), weighted by `P(bin | row)`.

use std::collections::BTreeMap;

use anyhow::Context;
use cfl::clustering::{KMeans, Partition};
use cfl::regularity::{
    partition_regularity_report, quasi_randomness, ReportOptions, SearchMode, WeightedBipartiteGraph, EXACT_LIMIT,
};
use serde::Serialize;

use super::{bin_outcome, cluster, fit_density, load_data, sub_seed};
use crate::artifacts::{fmt_f64, ArtifactWriter};
use crate::config::RunConfig;

#[derive(Serialize)]
struct Audit<'a> {
    k: usize,
    left_vertices: usize,
    right_vertices: usize,
    left_cells: Vec<usize>,
    right_cells: Vec<usize>,
    report: &'a cfl::regularity::RegularityReport,
    quasi_randomness: &'a cfl::regularity::QuasiRandomness,
}

/// Collapses identical rows; returns the distinct rows and, for each of
/// them, the index of its first occurrence.
fn distinct_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut seen: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let (mut out, mut first) = (Vec::new(), Vec::new());
    for (i, r) in rows.enumerate() {
        let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
        seen.entry(key).or_insert_with(|| {
            out.push(r.to_vec());
            first.push(i);
            out.len() - 1
        });
    }
    (out, first)
}

/// `cfl regularity-audit`.
pub fn command(cfg: &RunConfig, seed: u64, w: &mut ArtifactWriter) -> anyhow::Result<()> {
    let rc = &cfg.regularity;
    let d = load_data(cfg)?;
    w.stage_done("load");
    let binned = bin_outcome(&d, cfg.binning.scheme, cfg.binning.bins)?;
    let density = fit_density(&d, &binned.labels, cfg, seed)?;
    w.stage_done("fit");

    let (rows, first) = distinct_rows(density.cond.rows());
    let g = WeightedBipartiteGraph::from_rows(&rows).context("stage `regularity`")?;
    let m = g.right();
    let py = match rc.right_k {
        None => Partition::compact(&(0..m).collect::<Vec<_>>()),
        Some(k) => {
            let columns: Vec<Vec<f64>> = (0..m).map(|b| rows.iter().map(|r| r[b]).collect()).collect();
            let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
            KMeans::new(k, sub_seed(seed, "right_kmeans"))
                .restarts(cfg.clustering.restarts)
                .fit(&refs)
                .context("stage `regularity`: grouping outcome bins")?
                .partition
        }
    };
    let options = ReportOptions {
        sampled_fallback: rc.sampled_fallback.then(|| sub_seed(seed, "regularity")),
    };
    let qr_mode = if g.left() <= EXACT_LIMIT {
        SearchMode::Exact
    } else {
        SearchMode::sampled(sub_seed(seed, "quasi_randomness"))
    };
    let qr = quasi_randomness(&g, rc.beta, qr_mode).context("stage `regularity`: quasi-randomness")?;

    let mut summary = Vec::new();
    for k in cfg.ks()? {
        let fit = cluster(&density.cond, k, cfg.clustering.restarts, seed)?;
        let px = Partition::compact(&first.iter().map(|&i| fit.partition.labels()[i]).collect::<Vec<_>>());
        let report = partition_regularity_report(&g, &px, &py, rc.eps, options)
            .with_context(|| format!("stage `regularity` (k = {k})"))?;
        summary.push(vec![
            k.to_string(),
            report.total_pairs.to_string(),
            report.irregular_pairs.to_string(),
            report.not_refuted_pairs.to_string(),
            fmt_f64(report.irregular_fraction),
            report.within_bound.to_string(),
        ]);
        w.json(
            &format!("regularity_k{k}.json"),
            &Audit {
                k,
                left_vertices: g.left(),
                right_vertices: g.right(),
                left_cells: px.sizes(),
                right_cells: py.sizes(),
                report: &report,
                quasi_randomness: &qr,
            },
        )?;
    }
    w.stage_done("regularity");
    w.csv(
        "regularity.csv",
        &[
            "clusters",
            "pairs",
            "irregular",
            "not_refuted",
            "irregular_fraction",
            "within_bound",
        ],
        &summary,
    )?;
    Ok(())
}
