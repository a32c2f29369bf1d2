//! Propensity matching with balance diagnostics and a bootstrapped effect,
//! optionally followed by the pipeline on the matched sample.

use anyhow::Context;
use cfl::inference::{ate_bootstrap, balance_report, propensity_match};
use serde::Serialize;

use super::{covariate_list, load_data, pipeline, sub_seed};
use crate::artifacts::{fmt_f64, ArtifactWriter};
use crate::config::RunConfig;
use crate::svg::{render, BarChart};

#[derive(Serialize)]
struct MatchingSummary {
    n: usize,
    n_treated: usize,
    n_pairs: usize,
    unmatched_treated: usize,
    caliper: Option<f64>,
    distinct_controls: usize,
}

/// `cfl match`.
pub fn command(cfg: &RunConfig, seed: u64, w: &mut ArtifactWriter) -> anyhow::Result<()> {
    let d = load_data(cfg)?;
    w.stage_done("load");
    let mc = &cfg.matching;
    let covs = covariate_list(&d, &mc.covariates);
    let cov_refs: Vec<&str> = covs.iter().map(String::as_str).collect();
    let (model, m) = propensity_match(&d, &cov_refs, mc.caliper).context("stage `match`")?;
    w.json("propensity.json", &model)?;
    let ids = d.row_ids();
    let rows: Vec<Vec<String>> = m
        .pairs
        .iter()
        .map(|&(t, c)| {
            vec![
                ids[t].to_string(),
                ids[c].to_string(),
                fmt_f64(m.scores[t]),
                fmt_f64(m.scores[c]),
            ]
        })
        .collect();
    w.csv(
        "matches.csv",
        &["treated_row", "control_row", "treated_score", "control_score"],
        &rows,
    )?;
    let mut controls: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
    controls.sort_unstable();
    controls.dedup();
    w.json(
        "matching.json",
        &MatchingSummary {
            n: d.n(),
            n_treated: d.treatment()?.values.iter().filter(|&&v| v == 1.0).count(),
            n_pairs: m.pairs.len(),
            unmatched_treated: m.unmatched_treated.len(),
            caliper: m.caliper,
            distinct_controls: controls.len(),
        },
    )?;
    w.stage_done("match");

    let balance = balance_report(&d, &m, &cov_refs).context("stage `balance`")?;
    w.json("balance.json", &balance)?;
    let rows: Vec<Vec<String>> = balance
        .covariates
        .iter()
        .map(|b| vec![b.covariate.clone(), fmt_f64(b.smd_before), fmt_f64(b.smd_after)])
        .collect();
    w.csv("balance.csv", &["covariate", "smd_before", "smd_after"], &rows)?;
    let chart = BarChart {
        title: "standardized mean difference".into(),
        y_label: "|SMD|".into(),
        categories: balance.covariates.iter().map(|b| b.covariate.clone()).collect(),
        series: vec![
            (
                "before".into(),
                balance.covariates.iter().map(|b| b.smd_before.abs()).collect(),
            ),
            (
                "after".into(),
                balance.covariates.iter().map(|b| b.smd_after.abs()).collect(),
            ),
        ],
    };
    w.svg(
        "balance.svg",
        &render("Covariate balance before and after matching", &[chart]),
    )?;
    w.stage_done("balance");

    let outcomes = match &mc.outcomes {
        Some(o) => o.clone(),
        None => vec![d.outcome().context("stage `ate`")?.name.clone()],
    };
    let mut estimates = Vec::new();
    for o in &outcomes {
        let est = ate_bootstrap(&d, &m, o, mc.bootstrap, sub_seed(seed, &format!("bootstrap/{o}")))
            .with_context(|| format!("stage `ate` (outcome `{o}`)"))?;
        estimates.push(serde_json::json!({ "outcome": o, "estimate": est }));
    }
    w.json("ate.json", &estimates)?;
    w.stage_done("ate");

    if mc.then_pipeline {
        let mut rows: Vec<usize> = m.pairs.iter().flat_map(|&(t, c)| [t, c]).collect();
        rows.sort_unstable();
        rows.dedup();
        let matched = d.select_rows(&rows).context("stage `pseudo_population`")?;
        pipeline::run(cfg, seed, &matched, w, "pseudo_population/").context("pipeline on the matched sample")?;
    }
    Ok(())
}
