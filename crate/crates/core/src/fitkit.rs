//! Least-squares fits of asymmetry spectra with an external dm constraint,
//! the QM/SD mixture fit, lifetime fits and delta-chi2 model comparison.

use std::cell::RefCell;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::{BrentOpt, BrentRoot};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{AsymmetrySpectrum, Binning};
use crate::error::{Error, Result};
use crate::models::{self, AsymmetryBand, ModelParams, DEFAULT_TAU};
use crate::quad::{self, QuadOptions};

/// Fitted model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    Qm,
    Sd,
    Ps,
    Decohered,
    Lifetime,
}

impl FitModel {
    pub fn name(self) -> &'static str {
        match self {
            FitModel::Qm => "qm",
            FitModel::Sd => "sd",
            FitModel::Ps => "ps",
            FitModel::Decohered => "decohered",
            FitModel::Lifetime => "lifetime",
        }
    }

    fn parameter(self) -> &'static str {
        match self {
            FitModel::Decohered => "zeta",
            FitModel::Lifetime => "tau",
            _ => "dm",
        }
    }
}

impl fmt::Display for FitModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FitModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [FitModel::Qm, FitModel::Sd, FitModel::Ps, FitModel::Decohered, FitModel::Lifetime]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::parse("fit model", format!("unknown fit model {s:?}")))
    }
}

/// Gaussian prior on dm from the world average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Constraint {
    pub mean: f64,
    pub sigma: f64,
}

impl Default for Constraint {
    fn default() -> Self {
        Self {
            mean: 0.496,
            sigma: 0.014,
        }
    }
}

impl Constraint {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite() && self.mean.is_finite()) {
            return Err(Error::invalid(format!("constraint needs finite mean and sigma > 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn term(&self, dm: f64) -> f64 {
        ((dm - self.mean) / self.sigma).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinRule {
    /// Average weighted by the summed OF+SF decay rate.
    #[default]
    RateWeighted,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    Diagonal,
    /// Spectrum statistical covariance plus diagonal systematics.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitConfig {
    pub constraint: Constraint,
    /// Lifetime entering rate weights and the SD/PS marginalization.
    pub tau: f64,
    pub rule: BinRule,
    pub covariance: CovarianceMode,
    pub dm_range: (f64, f64),
    pub zeta_range: (f64, f64),
    pub scan_points: usize,
    pub dm_tol: f64,
    pub zeta_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            constraint: Constraint::default(),
            tau: DEFAULT_TAU,
            rule: BinRule::RateWeighted,
            covariance: CovarianceMode::Diagonal,
            dm_range: (0.2, 0.9),
            zeta_range: (-1.5, 2.5),
            scan_points: 71,
            dm_tol: 1e-5,
            zeta_tol: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.constraint.validate()?;
        ModelParams::new(self.constraint.mean.max(1e-3), self.tau, 0.0)?;
        for (name, (lo, hi)) in [("dm", self.dm_range), ("zeta", self.zeta_range)] {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::invalid(format!("{name} search range [{lo}, {hi}] is empty")));
            }
        }
        if self.dm_range.0 <= 0.0 {
            return Err(Error::invalid("dm search range must be positive"));
        }
        if self.scan_points < 3 {
            return Err(Error::invalid("scan needs at least 3 points"));
        }
        Ok(())
    }

    fn params(&self, dm: f64) -> ModelParams {
        ModelParams {
            dm,
            tau: self.tau,
            zeta: 0.0,
        }
    }
}

/// Model expectation for one bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Value(f64),
    Band(AsymmetryBand),
}

impl Prediction {
    /// Data minus prediction; inside a band this is exactly zero.
    pub fn residual(&self, a: f64) -> f64 {
        match self {
            Prediction::Value(v) => a - v,
            Prediction::Band(b) => b.residual(a),
        }
    }
}

/// Runs a fallible integrand through the quadrature, keeping the first error.
fn integrate_fallible<F>(f: F, a: f64, b: f64, opts: QuadOptions) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let failure = RefCell::new(None);
    let est = quad::integrate(
        |x| match f(x) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                0.0
            }
        },
        a,
        b,
        &[],
        opts,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(est?.value)
}

/// Average of `f` over `[lo, hi]` under the rule; the rate weight is `exp(-t / tau)`.
pub fn bin_average<F>(f: F, lo: f64, hi: f64, tau: f64, rule: BinRule) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    match rule {
        BinRule::Midpoint => f(0.5 * (lo + hi)),
        BinRule::RateWeighted => {
            // weights shifted to the bin's low edge to stay O(1)
            let norm = tau * (1.0 - (-(hi - lo) / tau).exp());
            let num = integrate_fallible(
                |t| Ok(f(t)? * (-(t - lo) / tau).exp()),
                lo,
                hi,
                QuadOptions::abs(1e-11 * norm),
            )?;
            Ok(num / norm)
        }
    }
}

/// Expected asymmetry (or PS band) in `[lo, hi]`.
///
/// For `Decohered` the mixture weight `p.zeta` is not range-checked, so fits
/// may float it outside `[0, 1]`.
pub fn bin_prediction(model: FitModel, p: &ModelParams, lo: f64, hi: f64, rule: BinRule) -> Result<Prediction> {
    if !(lo < hi) || lo < 0.0 {
        return Err(Error::invalid(format!("bin [{lo}, {hi}] is empty or negative")));
    }
    let tau = p.tau;
    let value = |f: &dyn Fn(f64) -> Result<f64>| bin_average(f, lo, hi, tau, rule).map(Prediction::Value);
    match model {
        FitModel::Qm => value(&|t| models::asym_qm(t, p)),
        FitModel::Sd => value(&|t| models::asym_sd_marginal(t, p)),
        FitModel::Decohered => value(&|t| models::mix_qm_sd(t, p, p.zeta)),
        FitModel::Ps => {
            let lower = bin_average(|t| Ok(models::ps_bounds_marginal(t, p)?.lower), lo, hi, tau, rule)?;
            let upper = bin_average(|t| Ok(models::ps_bounds_marginal(t, p)?.upper), lo, hi, tau, rule)?;
            Ok(Prediction::Band(AsymmetryBand { lower, upper }))
        }
        FitModel::Lifetime => Err(Error::invalid("lifetime has no asymmetry prediction")),
    }
}

pub fn predictions(model: FitModel, p: &ModelParams, binning: &Binning, rule: BinRule) -> Result<Vec<Prediction>> {
    let bins: Vec<(f64, f64)> = binning.iter().collect();
    if model == FitModel::Ps {
        bins.par_iter().map(|&(lo, hi)| bin_prediction(model, p, lo, hi, rule)).collect()
    } else {
        bins.iter().map(|&(lo, hi)| bin_prediction(model, p, lo, hi, rule)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chi2 {
    pub value: f64,
    pub constraint_term: f64,
    pub residuals: Vec<f64>,
    pub predictions: Vec<Prediction>,
}

/// Inverse error matrix for the chosen mode.
fn weight_matrix(spec: &AsymmetrySpectrum, mode: CovarianceMode) -> Result<DMatrix<f64>> {
    let total = spec.total_err();
    if let Some(i) = total.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::invalid(format!("bin {i} has non-positive total error {}", total[i])));
    }
    match mode {
        CovarianceMode::Diagonal => Ok(DMatrix::from_diagonal(&DVector::from_iterator(
            total.len(),
            total.iter().map(|s| 1.0 / (s * s)),
        ))),
        CovarianceMode::Full => {
            let stat = spec
                .stat_cov
                .as_ref()
                .ok_or_else(|| Error::invalid("full-covariance fit needs a spectrum with statistical covariance"))?;
            let syst = DVector::from_iterator(spec.len(), spec.syst_err.iter().map(|s| s * s));
            let cov = stat + DMatrix::from_diagonal(&syst);
            cov.cholesky()
                .map(|c| c.inverse())
                .ok_or_else(|| Error::Numerical("spectrum covariance is not positive definite".into()))
        }
    }
}

fn chi2_with(spec: &AsymmetrySpectrum, preds: Vec<Prediction>, dm: f64, weights: &DMatrix<f64>, c: &Constraint) -> Chi2 {
    let residuals: Vec<f64> = spec.a.iter().zip(&preds).map(|(a, p)| p.residual(*a)).collect();
    let r = DVector::from_column_slice(&residuals);
    let data = (r.transpose() * weights * &r)[(0, 0)];
    let constraint_term = c.term(dm);
    Chi2 {
        value: data + constraint_term,
        constraint_term,
        residuals,
        predictions: preds,
    }
}

/// chi2 of `spec` against `model` at `dm` (and `zeta` for the mixture).
pub fn chi2(spec: &AsymmetrySpectrum, model: FitModel, dm: f64, zeta: f64, cfg: &FitConfig) -> Result<Chi2> {
    cfg.constraint.validate()?;
    let weights = weight_matrix(spec, cfg.covariance)?;
    let p = cfg.params(dm).with_zeta(zeta);
    let preds = predictions(model, &p, &spec.binning, cfg.rule)?;
    Ok(chi2_with(spec, preds, dm, &weights, &cfg.constraint))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// The chi2_min + 1 crossings differ by more than 20%.
    AsymmetricErrors,
    /// One or both crossings lie outside the search range.
    FlatProfile,
    MidpointRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    /// Fitted parameter: dm in ps^-1, zeta, or tau in ps.
    pub theta_hat: f64,
    pub theta_err: f64,
    pub err_down: f64,
    pub err_up: f64,
    pub chi2: f64,
    pub dof: usize,
    pub residuals: Vec<f64>,
    pub predictions: Vec<Prediction>,
    /// dm at the optimum of the mixture fit.
    pub dm_at_min: Option<f64>,
    pub flags: Vec<FitFlag>,
}

impl FitResult {
    pub fn parameter(&self) -> &'static str {
        self.model.parameter()
    }
}

struct Objective<'a>(&'a (dyn Fn(f64) -> Result<f64> + Sync));

impl CostFunction for Objective<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, x: &f64) -> std::result::Result<f64, argmin::core::Error> {
        (self.0)(*x).map_err(argmin::core::Error::from)
    }
}

fn from_argmin(e: argmin::core::Error) -> Error {
    match e.downcast::<Error>() {
        Ok(inner) => inner,
        Err(other) => Error::Numerical(other.to_string()),
    }
}

/// Grid scan followed by Brent refinement around the best grid point.
///
/// A best grid point at either end of `grid` is reported as a boundary minimum.
fn minimize(f: &(dyn Fn(f64) -> Result<f64> + Sync), grid: &[f64], tol: f64) -> Result<(f64, f64)> {
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect::<Result<_>>()?;
    let k = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("non-empty grid");
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    if k == 0 || k == grid.len() - 1 {
        return Err(Error::FitBoundary { value: grid[k], lo, hi });
    }
    let solver = BrentOpt::new(grid[k - 1], grid[k + 1]).set_tolerance(1.5e-8, tol / 3.0);
    let res = Executor::new(Objective(f), solver)
        .configure(|s| s.max_iters(200))
        .run()
        .map_err(from_argmin)?;
    let state = res.state();
    let (x, fx) = (state.best_param.unwrap_or(grid[k]), state.best_cost);
    Ok(if fx <= values[k] { (x, fx) } else { (grid[k], values[k]) })
}

/// Where `f` first rises to `target`, walking from `x0` towards `limit`.
fn crossing(f: &(dyn Fn(f64) -> Result<f64> + Sync), x0: f64, target: f64, step: f64, limit: f64, tol: f64) -> Result<Option<f64>> {
    let dir = (limit - x0).signum();
    let mut prev = x0;
    loop {
        let x = if ((prev + dir * step) - limit) * dir >= 0.0 { limit } else { prev + dir * step };
        if f(x)? >= target {
            let (a, b) = if dir > 0.0 { (prev, x) } else { (x, prev) };
            let g = |t: f64| Ok(f(t)? - target);
            let res = Executor::new(Objective(&g), BrentRoot::new(a, b, tol))
                .configure(|s| s.max_iters(200))
                .run()
                .map_err(from_argmin)?;
            return Ok(Some(res.state().best_param.unwrap_or(x)));
        }
        if x == limit {
            return Ok(None);
        }
        prev = x;
    }
}

struct Interval {
    down: f64,
    up: f64,
    flags: Vec<FitFlag>,
}

fn delta_one_interval(
    f: &(dyn Fn(f64) -> Result<f64> + Sync),
    x0: f64,
    f0: f64,
    range: (f64, f64),
    step: f64,
    tol: f64,
) -> Result<Interval> {
    let target = f0 + 1.0;
    let lo = crossing(f, x0, target, step, range.0, tol)?;
    let hi = crossing(f, x0, target, step, range.1, tol)?;
    let mut flags = Vec::new();
    let (down, up) = match (lo, hi) {
        (Some(l), Some(h)) => (x0 - l, h - x0),
        (Some(l), None) => {
            flags.push(FitFlag::FlatProfile);
            (x0 - l, x0 - l)
        }
        (None, Some(h)) => {
            flags.push(FitFlag::FlatProfile);
            (h - x0, h - x0)
        }
        (None, None) => {
            return Err(Error::Numerical(format!(
                "chi2 stays within 1 of its minimum across [{}, {}]",
                range.0, range.1
            )))
        }
    };
    if down.max(up) > 1.2 * down.min(up) {
        flags.push(FitFlag::AsymmetricErrors);
    }
    Ok(Interval { down, up, flags })
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn check_spectrum(spec: &AsymmetrySpectrum) -> Result<()> {
    if spec.is_empty() {
        return Err(Error::invalid("spectrum has no bins"));
    }
    if let Some(i) = spec.a.iter().position(|a| !a.is_finite()) {
        return Err(Error::invalid(format!("bin {i} asymmetry is not finite")));
    }
    Ok(())
}

/// Fits dm for a single model (QM, SD or the PS band).
pub fn fit_model(spec: &AsymmetrySpectrum, model: FitModel, cfg: &FitConfig) -> Result<FitResult> {
    if !matches!(model, FitModel::Qm | FitModel::Sd | FitModel::Ps) {
        return Err(Error::invalid(format!("fit_model handles qm, sd and ps, not {model}")));
    }
    cfg.validate()?;
    check_spectrum(spec)?;
    let weights = weight_matrix(spec, cfg.covariance)?;
    let eval = |dm: f64| -> Result<Chi2> {
        let preds = predictions(model, &cfg.params(dm), &spec.binning, cfg.rule)?;
        Ok(chi2_with(spec, preds, dm, &weights, &cfg.constraint))
    };
    let f = |dm: f64| eval(dm).map(|c| c.value);
    let grid = linspace(cfg.dm_range.0, cfg.dm_range.1, cfg.scan_points);
    let (dm, _) = minimize(&f, &grid, cfg.dm_tol)?;
    let best = eval(dm)?;
    let iv = delta_one_interval(&f, dm, best.value, cfg.dm_range, 0.005, cfg.dm_tol * 0.1)?;
    Ok(finish(model, dm, best, iv, spec.len(), cfg, None))
}

fn finish(model: FitModel, theta: f64, best: Chi2, iv: Interval, dof: usize, cfg: &FitConfig, dm_at_min: Option<f64>) -> FitResult {
    let mut flags = iv.flags;
    if cfg.rule == BinRule::Midpoint {
        flags.push(FitFlag::MidpointRule);
    }
    FitResult {
        model,
        theta_hat: theta,
        theta_err: 0.5 * (iv.down + iv.up),
        err_down: iv.down,
        err_up: iv.up,
        chi2: best.value,
        dof,
        residuals: best.residuals,
        predictions: best.predictions,
        dm_at_min,
        flags,
    }
}

/// Fits `(1 - zeta) A_QM + zeta A_SD`, profiling dm; zeta is not confined to [0, 1].
pub fn fit_zeta(spec: &AsymmetrySpectrum, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_spectrum(spec)?;
    let weights = weight_matrix(spec, cfg.covariance)?;
    let values = |preds: Vec<Prediction>| -> Vec<f64> {
        preds
            .into_iter()
            .map(|p| match p {
                Prediction::Value(v) => v,
                Prediction::Band(_) => unreachable!("qm and sd predict values"),
            })
            .collect()
    };
    // the mixture is linear in zeta, so only the two endpoint predictions are needed per dm
    let components = |dm: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let p = cfg.params(dm);
        Ok((
            values(predictions(FitModel::Qm, &p, &spec.binning, cfg.rule)?),
            values(predictions(FitModel::Sd, &p, &spec.binning, cfg.rule)?),
        ))
    };
    let eval = |dm: f64, zeta: f64| -> Result<Chi2> {
        let (q, s) = components(dm)?;
        let preds = q.iter().zip(&s).map(|(q, s)| Prediction::Value((1.0 - zeta) * q + zeta * s)).collect();
        Ok(chi2_with(spec, preds, dm, &weights, &cfg.constraint))
    };
    let dm_grid = linspace(cfg.dm_range.0, cfg.dm_range.1, cfg.scan_points);
    let profile_dm = |zeta: f64| -> Result<(f64, f64)> {
        let f = |dm: f64| eval(dm, zeta).map(|c| c.value);
        minimize(&f, &dm_grid, cfg.dm_tol)
    };
    let profile = |zeta: f64| profile_dm(zeta).map(|(_, v)| v);
    let zeta_grid = linspace(cfg.zeta_range.0, cfg.zeta_range.1, 41);
    let (zeta, _) = minimize(&profile, &zeta_grid, cfg.zeta_tol)?;
    let (dm, _) = profile_dm(zeta)?;
    let best = eval(dm, zeta)?;
    let iv = delta_one_interval(&profile, zeta, best.value, cfg.zeta_range, 0.05, cfg.zeta_tol * 0.1)?;
    Ok(finish(FitModel::Decohered, zeta, best, iv, spec.len(), cfg, Some(dm)))
}

/// Fits whichever model is named; the mixture goes through [`fit_zeta`].
pub fn fit(spec: &AsymmetrySpectrum, model: FitModel, cfg: &FitConfig) -> Result<FitResult> {
    match model {
        FitModel::Decohered => fit_zeta(spec, cfg),
        FitModel::Lifetime => Err(Error::invalid("lifetime fits take dt values or counts, not an asymmetry spectrum")),
        m => fit_model(spec, m, cfg),
    }
}

/// `sqrt(chi2_b - chi2_a)` in sigma units, negative when `b` fits better.
pub fn significance(fit_a: &FitResult, fit_b: &FitResult) -> f64 {
    let d = fit_b.chi2 - fit_a.chi2;
    d.signum() * d.abs().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifetimeMethod {
    #[default]
    Likelihood,
    LeastSquares,
}

const TAU_RANGE: (f64, f64) = (0.05, 50.0);

fn tau_grid() -> Vec<f64> {
    let (a, b) = (TAU_RANGE.0.ln(), TAU_RANGE.1.ln());
    linspace(a, b, 121).into_iter().map(f64::exp).collect()
}

/// Fraction of an exponential on `[r0, r1]` falling in `[lo, hi]`.
fn exp_fraction(lo: f64, hi: f64, r0: f64, r1: f64, tau: f64) -> f64 {
    // exp(-(x - r0) / tau) keeps both terms O(1)
    let e = |x: f64| (-(x - r0) / tau).exp();
    (e(lo) - e(hi)) / (1.0 - e(r1))
}

fn lifetime_result(tau: f64, best: f64, iv: Interval, dof: usize, residuals: Vec<f64>) -> FitResult {
    FitResult {
        model: FitModel::Lifetime,
        theta_hat: tau,
        theta_err: 0.5 * (iv.down + iv.up),
        err_down: iv.down,
        err_up: iv.up,
        chi2: best,
        dof,
        residuals,
        predictions: Vec::new(),
        dm_at_min: None,
        flags: iv.flags,
    }
}

/// Binned lifetime fit of summed OF+SF counts to `exp(-t/tau)` normalized on the binning range.
///
/// The likelihood method minimizes the multinomial deviance, so `chi2` is the
/// deviance against the saturated model; least squares uses `variances` (or
/// the counts themselves).
pub fn fit_lifetime_binned(
    counts: &[f64],
    variances: Option<&[f64]>,
    binning: &Binning,
    method: LifetimeMethod,
) -> Result<FitResult> {
    if counts.len() != binning.len() {
        return Err(Error::BinningMismatch(format!("{} counts for {} bins", counts.len(), binning.len())));
    }
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("lifetime fit needs a non-empty histogram"));
    }
    let (r0, r1) = (binning.edges()[0], *binning.edges().last().expect("validated"));
    let bins: Vec<(f64, f64)> = binning.iter().collect();
    let expected = |tau: f64| -> Vec<f64> { bins.iter().map(|&(lo, hi)| total * exp_fraction(lo, hi, r0, r1, tau)).collect() };
    let objective: Box<dyn Fn(f64) -> Result<f64> + Sync> = match method {
        LifetimeMethod::Likelihood => {
            if let Some(i) = counts.iter().position(|&n| n < 0.0) {
                return Err(Error::invalid(format!("likelihood fit needs non-negative counts; bin {i} has {}", counts[i])));
            }
            Box::new(|tau| {
                Ok(2.0
                    * counts
                        .iter()
                        .zip(expected(tau))
                        .map(|(&n, mu)| if n > 0.0 { n * (n / mu).ln() } else { 0.0 } + mu - n)
                        .sum::<f64>())
            })
        }
        LifetimeMethod::LeastSquares => {
            let var: Vec<f64> = match variances {
                Some(v) if v.len() == counts.len() => v.iter().map(|&x| x.max(1.0)).collect(),
                Some(v) => {
                    return Err(Error::BinningMismatch(format!("{} variances for {} bins", v.len(), counts.len())));
                }
                None => counts.iter().map(|&n| n.max(1.0)).collect(),
            };
            Box::new(move |tau| {
                Ok(counts
                    .iter()
                    .zip(expected(tau))
                    .zip(&var)
                    .map(|((&n, mu), v)| (n - mu).powi(2) / v)
                    .sum::<f64>())
            })
        }
    };
    let (tau, best) = minimize(&*objective, &tau_grid(), 1e-7)?;
    let iv = delta_one_interval(&*objective, tau, best, TAU_RANGE, 0.01 * tau, 1e-8)?;
    let residuals = counts.iter().zip(expected(tau)).map(|(n, mu)| n - mu).collect();
    Ok(lifetime_result(tau, best, iv, counts.len().saturating_sub(1), residuals))
}

/// Unbinned maximum-likelihood lifetime from decay-time differences in `range`.
///
/// Values outside `range` are ignored. The reported `chi2` is the deviance of
/// the fitted density against the events histogrammed in `report_binning`.
pub fn fit_lifetime_events(dts: &[f64], range: (f64, f64), report_binning: &Binning) -> Result<FitResult> {
    let (r0, r1) = range;
    if !(0.0 <= r0 && r0 < r1) {
        return Err(Error::invalid(format!("lifetime range [{r0}, {r1}] is invalid")));
    }
    let inside: Vec<f64> = dts.iter().copied().filter(|&t| t >= r0 && t < r1).collect();
    if inside.is_empty() {
        return Err(Error::invalid("lifetime fit needs at least one event in range"));
    }
    let n = inside.len() as f64;
    let sum_shift: f64 = inside.iter().map(|t| t - r0).sum();
    // -2 ln L of the truncated exponential, up to a constant
    let nll = |tau: f64| Ok(2.0 * (n * (tau * (1.0 - (-(r1 - r0) / tau).exp())).ln() + sum_shift / tau));
    let (tau, best) = minimize(&nll, &tau_grid(), 1e-7)?;
    let iv = delta_one_interval(&nll, tau, best, TAU_RANGE, 0.01 * tau, 1e-8)?;

    let mut hist = vec![0.0; report_binning.len()];
    for &t in &inside {
        if let Some(i) = report_binning.find(t) {
            hist[i] += 1.0;
        }
    }
    let (b0, b1) = (report_binning.edges()[0], *report_binning.edges().last().expect("validated"));
    let in_report: f64 = hist.iter().sum();
    let mut deviance = 0.0;
    let mut residuals = Vec::with_capacity(hist.len());
    for (i, (lo, hi)) in report_binning.iter().enumerate() {
        let mu = in_report * exp_fraction(lo, hi, b0, b1, tau);
        let k = hist[i];
        deviance += 2.0 * (if k > 0.0 { k * (k / mu).ln() } else { 0.0 } + mu - k);
        residuals.push(k - mu);
    }
    Ok(lifetime_result(tau, deviance, iv, report_binning.len().saturating_sub(1), residuals))
}

/// Text report: one block per fit plus the pairwise significance matrix.
pub fn write_report<W: Write>(mut out: W, spec: &AsymmetrySpectrum, fits: &[FitResult]) -> Result<()> {
    for f in fits {
        writeln!(out, "[fit {}]", f.model)?;
        writeln!(out, "{}_hat = {:.5}", f.parameter(), f.theta_hat)?;
        writeln!(out, "{}_err = {:.5} (-{:.5} +{:.5})", f.parameter(), f.theta_err, f.err_down, f.err_up)?;
        if let Some(dm) = f.dm_at_min {
            writeln!(out, "dm_at_min = {dm:.5}")?;
        }
        writeln!(out, "chi2 = {:.3}", f.chi2)?;
        writeln!(out, "dof = {}", f.dof)?;
        if !f.flags.is_empty() {
            let names: Vec<String> = f.flags.iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "flags = {}", names.join(","))?;
        }
        if f.predictions.len() == spec.len() {
            writeln!(out, "bin,lo_ps,hi_ps,a,total_err,pred_lo,pred_hi,residual")?;
            let total = spec.total_err();
            for (i, (lo, hi)) in spec.binning.iter().enumerate() {
                let (pl, ph) = match f.predictions[i] {
                    Prediction::Value(v) => (v, v),
                    Prediction::Band(b) => (b.lower, b.upper),
                };
                writeln!(
                    out,
                    "{},{lo},{hi},{},{},{pl:.6},{ph:.6},{:.6}",
                    i + 1,
                    spec.a[i],
                    total[i],
                    f.residuals[i]
                )?;
            }
        }
        writeln!(out)?;
    }
    let comparable: Vec<&FitResult> = fits.iter().filter(|f| f.model != FitModel::Lifetime).collect();
    if comparable.len() > 1 {
        writeln!(out, "[significance]")?;
        let names: Vec<&str> = comparable.iter().map(|f| f.model.name()).collect();
        writeln!(out, "row_vs_col,{}", names.join(","))?;
        for a in &comparable {
            let row: Vec<String> = comparable.iter().map(|b| format!("{:.3}", significance(a, b))).collect();
            writeln!(out, "{},{}", a.model, row.join(","))?;
        }
    }
    Ok(())
}
