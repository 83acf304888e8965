//! Fits of the published asymmetry table compared against the quoted results.

use std::io::Write;

use serde::Serialize;

use crate::analysis::AsymmetrySpectrum;
use crate::error::Result;
use crate::fitkit::{self, BinRule, FitConfig, FitModel, FitResult};

/// One published number, what we computed, and the accepted tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub label: String,
    pub published: f64,
    pub computed: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(label: &str, published: f64, computed: f64, tolerance: f64) -> Self {
        Self {
            label: label.to_string(),
            published,
            computed,
            tolerance,
        }
    }

    pub fn pass(&self) -> bool {
        (self.computed - self.published).abs() <= self.tolerance
    }
}

/// Shift of a fit when bins are evaluated at their midpoints instead of rate-weighted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleShift {
    pub model: FitModel,
    pub d_theta: f64,
    pub d_chi2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reproduction {
    pub fits: Vec<FitResult>,
    pub sig_sd: f64,
    pub sig_ps: f64,
    pub checks: Vec<Check>,
    pub midpoint_shift: Vec<RuleShift>,
}

impl Reproduction {
    pub fn fit(&self, model: FitModel) -> &FitResult {
        self.fits.iter().find(|f| f.model == model).expect("all four models are fitted")
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(Check::pass)
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{:<16} {:>10} {:>10} {:>8}  status", "quantity", "published", "computed", "tol")?;
        for c in &self.checks {
            let status = if c.pass() { "PASS" } else { "FAIL" };
            writeln!(out, "{:<16} {:>10.4} {:>10.4} {:>8.4}  {status}", c.label, c.published, c.computed, c.tolerance)?;
        }
        Ok(())
    }
}

const MODELS: [FitModel; 4] = [FitModel::Qm, FitModel::Sd, FitModel::Ps, FitModel::Decohered];

fn fit_all(spec: &AsymmetrySpectrum, cfg: &FitConfig) -> Result<Vec<FitResult>> {
    MODELS.iter().map(|&m| fitkit::fit(spec, m, cfg)).collect()
}

/// Fits QM, SD, PS and the decoherence mixture and checks them against the published values.
pub fn reproduce(spec: &AsymmetrySpectrum, cfg: &FitConfig) -> Result<Reproduction> {
    let fits = fit_all(spec, cfg)?;
    let midpoint = fit_all(spec, &FitConfig { rule: BinRule::Midpoint, ..*cfg })?;
    let get = |m: FitModel| fits.iter().find(|f| f.model == m).expect("fitted");
    let (qm, sd, ps, zeta) = (get(FitModel::Qm), get(FitModel::Sd), get(FitModel::Ps), get(FitModel::Decohered));
    let sig_sd = fitkit::significance(qm, sd);
    let sig_ps = fitkit::significance(qm, ps);
    let checks = vec![
        Check::new("qm dm", 0.501, qm.theta_hat, 0.005),
        Check::new("qm dm_err", 0.009, qm.theta_err, 0.002),
        Check::new("qm chi2", 5.2, qm.chi2, 1.0),
        Check::new("sd dm", 0.419, sd.theta_hat, 0.010),
        Check::new("sd chi2", 174.0, sd.chi2, 10.0),
        Check::new("ps dm", 0.447, ps.theta_hat, 0.015),
        Check::new("ps chi2", 31.3, ps.chi2, 5.0),
        Check::new("sigma qm-sd", 13.0, sig_sd, 0.5),
        Check::new("sigma qm-ps", 5.1, sig_ps, 0.3),
        Check::new("zeta", 0.029, zeta.theta_hat, 0.02),
        Check::new("zeta_err", 0.057, zeta.theta_err, 0.01),
    ];
    let midpoint_shift = fits
        .iter()
        .zip(&midpoint)
        .map(|(r, m)| RuleShift {
            model: r.model,
            d_theta: m.theta_hat - r.theta_hat,
            d_chi2: m.chi2 - r.chi2,
        })
        .collect();
    Ok(Reproduction {
        fits,
        sig_sd,
        sig_ps,
        checks,
        midpoint_shift,
    })
}
