//! bin -> fit -> predict -> cluster -> profile, plus the optional
//! downstream regressions and heterogeneity flags.

use anyhow::Context;
use cfl::clustering::{cluster_profile, Partition};
use cfl::data::Dataset;
use cfl::inference::{cluster_indicator_regression, heterogeneity_flags, interaction_regression, OlsResult};
use serde::Serialize;

use super::{bin_outcome, cluster, covariate_list, fit_density};
use crate::artifacts::{fmt_f64, ArtifactWriter};
use crate::config::RunConfig;
use crate::svg::{render, BarChart};

#[derive(Serialize)]
struct BinsArtifact<'a> {
    edges: &'a cfl::binning::BinEdges,
    requested_bins: usize,
    realized_bins: usize,
    counts: Vec<usize>,
}

#[derive(Serialize)]
struct ClustersArtifact {
    k: usize,
    sizes: Vec<usize>,
    inertia: f64,
    best_restart: usize,
    iterations: usize,
    objective_trace: Vec<f64>,
    centroids: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ClusterRegressionRow {
    k: usize,
    result: OlsResult,
}

/// Runs every pipeline stage on `d`, writing artifacts under `prefix`.
pub fn run(cfg: &RunConfig, seed: u64, d: &Dataset, w: &mut ArtifactWriter, prefix: &str) -> anyhow::Result<()> {
    let ks = cfg.ks()?;
    let binned = bin_outcome(d, cfg.binning.scheme, cfg.binning.bins)?;
    w.json(
        &format!("{prefix}bins.json"),
        &BinsArtifact {
            edges: &binned.edges,
            requested_bins: binned.edges.requested,
            realized_bins: binned.edges.m(),
            counts: binned.labels.counts(),
        },
    )?;
    let outcome = &d.outcome()?.values;
    let rows: Vec<Vec<String>> = (0..d.n())
        .map(|i| {
            vec![
                d.row_ids()[i].to_string(),
                outcome[i].to_string(),
                binned.labels.labels[i].to_string(),
            ]
        })
        .collect();
    w.csv(&format!("{prefix}bins.csv"), &["row", "outcome", "bin"], &rows)?;
    w.stage_done("bin");

    let density = fit_density(d, &binned.labels, cfg, seed)?;
    w.json(&format!("{prefix}model.json"), &density.model)?;
    let m = density.cond.m();
    let header: Vec<String> = std::iter::once("row".to_string())
        .chain((0..m).map(|k| format!("p{k}")))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = density
        .cond
        .rows()
        .enumerate()
        .map(|(i, r)| {
            std::iter::once(d.row_ids()[i].to_string())
                .chain(r.iter().map(f64::to_string))
                .collect()
        })
        .collect();
    w.csv(&format!("{prefix}cond_dist.csv"), &header, &rows)?;
    w.stage_done("fit");

    let mut partitions = Vec::new();
    for &k in &ks {
        let fit = cluster(&density.cond, k, cfg.clustering.restarts, seed)?;
        let p = fit.partition.clone();
        w.json(
            &format!("{prefix}clusters_k{k}.json"),
            &ClustersArtifact {
                k,
                sizes: p.sizes(),
                inertia: fit.inertia,
                best_restart: fit.restart,
                iterations: fit.iterations,
                objective_trace: fit.objective_trace,
                centroids: p.centroids.clone(),
            },
        )?;
        let rows: Vec<Vec<String>> = (0..d.n())
            .map(|i| vec![d.row_ids()[i].to_string(), p.labels()[i].to_string()])
            .collect();
        w.csv(&format!("{prefix}partition_k{k}.csv"), &["row", "cluster"], &rows)?;
        partitions.push((k, p));
    }
    w.stage_done("cluster");

    for (k, p) in &partitions {
        profile(cfg, d, p, *k, w, prefix).with_context(|| format!("stage `profile` (k = {k})"))?;
    }
    w.stage_done("profile");

    analysis(cfg, d, &partitions, w, prefix).context("stage `analysis`")?;
    w.stage_done("analysis");
    Ok(())
}

fn profile(
    cfg: &RunConfig,
    d: &Dataset,
    p: &Partition,
    k: usize,
    w: &mut ArtifactWriter,
    prefix: &str,
) -> anyhow::Result<()> {
    let covs = covariate_list(d, &cfg.report.profile_covariates);
    let cov_refs: Vec<&str> = covs.iter().map(String::as_str).collect();
    let prof = cluster_profile(d, p, &cov_refs)?;
    w.json(&format!("{prefix}profile_k{k}.json"), &prof)?;

    let mut categories = vec!["global".to_string()];
    categories.extend((0..k).map(|c| format!("cluster {c}")));
    let charts: Vec<BarChart> = covs
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut vals = vec![prof.global_means[j]];
            vals.extend(prof.local_means.iter().map(|m| m[j]));
            BarChart {
                title: name.clone(),
                y_label: "mean".into(),
                categories: categories.clone(),
                series: vec![("mean".into(), vals)],
            }
        })
        .collect();
    w.svg(
        &format!("{prefix}local_vs_global_k{k}.svg"),
        &render(&format!("Local and global covariate means, k = {k}"), &charts),
    )?;

    let hist_col = cfg
        .report
        .histogram
        .clone()
        .or_else(|| d.column("age").ok().map(|_| "age".to_string()))
        .or_else(|| covs.first().cloned());
    if let Some(col) = hist_col {
        w.svg(
            &format!("{prefix}histogram_k{k}.svg"),
            &render(&format!("{col} by cluster, k = {k}"), &[histogram(d, p, &col)?]),
        )?;
    }

    if let Ok(t) = d.treatment() {
        let mut treated = vec![0.0; k];
        let mut control = vec![0.0; k];
        for (&v, &l) in t.values.iter().zip(p.labels()) {
            if v == 1.0 {
                treated[l] += 1.0;
            } else {
                control[l] += 1.0;
            }
        }
        let chart = BarChart {
            title: "rows per cluster".into(),
            y_label: "count".into(),
            categories: (0..k).map(|c| format!("cluster {c}")).collect(),
            series: vec![("treated".into(), treated), ("control".into(), control)],
        };
        w.svg(
            &format!("{prefix}treatment_by_cluster_k{k}.svg"),
            &render(&format!("Treated and control rows by cluster, k = {k}"), &[chart]),
        )?;
    }
    Ok(())
}

fn histogram(d: &Dataset, p: &Partition, col: &str) -> anyhow::Result<BarChart> {
    let v = d.values(col)?;
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = 10;
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![vec![0.0; bins]; p.k()];
    for (&x, &l) in v.iter().zip(p.labels()) {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[l][b] += 1.0;
    }
    Ok(BarChart {
        title: col.to_string(),
        y_label: "rows".into(),
        categories: (0..bins).map(|b| format!("{:.3}", lo + width * b as f64)).collect(),
        series: counts
            .into_iter()
            .enumerate()
            .map(|(c, v)| (format!("cluster {c}"), v))
            .collect(),
    })
}

fn ols_rows(r: &OlsResult) -> Vec<Vec<String>> {
    let opt = |v: Option<f64>| v.map_or(String::new(), fmt_f64);
    r.coefficients
        .iter()
        .map(|c| vec![c.name.clone(), fmt_f64(c.coef), fmt_f64(c.se), opt(c.t), opt(c.p)])
        .collect()
}

fn analysis(
    cfg: &RunConfig,
    d: &Dataset,
    partitions: &[(usize, Partition)],
    w: &mut ArtifactWriter,
    prefix: &str,
) -> anyhow::Result<()> {
    let rep = &cfg.report;
    if let Some(moderator) = &rep.interaction_moderator {
        let r = interaction_regression(d, moderator)?;
        w.json(&format!("{prefix}interaction.json"), &r)?;
        w.csv(
            &format!("{prefix}interaction.csv"),
            &["variable", "coef", "std_err", "t", "p"],
            &ols_rows(&r),
        )?;
    }
    if !rep.cluster_treatments.is_empty() {
        let treatments: Vec<&str> = rep.cluster_treatments.iter().map(String::as_str).collect();
        let mut all = Vec::new();
        let mut rows = Vec::new();
        for (k, p) in partitions {
            let r = cluster_indicator_regression(d, p, &treatments, rep.robust).with_context(|| format!("k = {k}"))?;
            for t in &treatments {
                let c = r.get(t).expect("treatment coefficient present");
                rows.push(vec![
                    k.to_string(),
                    t.to_string(),
                    fmt_f64(c.coef),
                    fmt_f64(c.se),
                    c.p.map_or(String::new(), fmt_f64),
                ]);
            }
            all.push(ClusterRegressionRow { k: *k, result: r });
        }
        w.json(&format!("{prefix}cluster_effects.json"), &all)?;
        w.csv(
            &format!("{prefix}cluster_effects.csv"),
            &["clusters", "treatment", "coef", "std_err", "p"],
            &rows,
        )?;
    }
    if let Some(stratum) = &rep.heterogeneity_stratum {
        for (k, p) in partitions {
            let r = heterogeneity_flags(d, p, stratum, rep.randomized)?;
            w.json(&format!("{prefix}heterogeneity_k{k}.json"), &r)?;
        }
    }
    Ok(())
}

/// `cfl pipeline`.
pub fn command(cfg: &RunConfig, seed: u64, w: &mut ArtifactWriter) -> anyhow::Result<()> {
    let d = super::load_data(cfg)?;
    w.stage_done("load");
    run(cfg, seed, &d, w, "")
}
