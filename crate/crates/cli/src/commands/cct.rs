//! Monte Carlo check that the observational partition coarsens the causal
//! one on random synthetic models.

use cfl::scm::{cct_monte_carlo, CctConfig, Dims};

use crate::artifacts::ArtifactWriter;
use crate::config::RunConfig;

/// `cfl verify-cct`. Exits with an error when any violation is found.
pub fn command(cfg: &RunConfig, seed: u64, w: &mut ArtifactWriter) -> anyhow::Result<()> {
    let s = &cfg.cct;
    let [z, x, m] = s.dims;
    let mut c = CctConfig::new(s.trials, Dims::new(z, x, m), seed);
    c.tol = s.tol;
    c.degenerate_margin = s.degenerate_margin;
    c.family = s.family;
    c.side = s.side;
    let report = cct_monte_carlo(&c)?;
    w.stage_done("cct");
    w.json("cct_report.json", &report)?;
    if report.violations > 0 {
        anyhow::bail!(
            "{} of {} trials violated the coarsening property (first: trial {})",
            report.violations,
            report.trials,
            report.violating_trials[0]
        );
    }
    Ok(())
}
