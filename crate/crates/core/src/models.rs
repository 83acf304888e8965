//! Flavour-asymmetry predictions for entangled neutral-B pairs.
//!
//! Three pictures are provided: the entangled (QM) cosine, immediate
//! disentanglement (SD) where each meson oscillates independently, and the
//! band of asymmetries reachable by the Pompili-Selleri local-realistic class
//! (PS). SD and PS depend on the earlier decay time `t_min` as well as on `dt`;
//! their measurable curves are obtained by averaging over `t_min` at fixed `dt`
//! with the pair decay weight `exp(-2 t_min / tau)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{self, QuadOptions};

pub const DEFAULT_DM: f64 = 0.507;
pub const DEFAULT_TAU: f64 = 1.53;

/// Upper integration limit for `t_min`, in units of tau.
const MARGINAL_SPAN_TAUS: f64 = 40.0;
const MARGINAL_ABS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Mixing frequency in ps^-1.
    pub dm: f64,
    /// B0 lifetime in ps.
    pub tau: f64,
    /// Decoherent fraction, only used by the decohered model.
    pub zeta: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            dm: DEFAULT_DM,
            tau: DEFAULT_TAU,
            zeta: 0.0,
        }
    }
}

impl ModelParams {
    pub fn new(dm: f64, tau: f64, zeta: f64) -> Result<Self> {
        let p = Self { dm, tau, zeta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dm > 0.0 && self.dm.is_finite()) {
            return Err(Error::invalid(format!("dm must be > 0, got {}", self.dm)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::invalid(format!("zeta must lie in [0, 1], got {}", self.zeta)));
        }
        Ok(())
    }

    pub fn with_dm(self, dm: f64) -> Self {
        Self { dm, ..self }
    }

    pub fn with_zeta(self, zeta: f64) -> Self {
        Self { zeta, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlavourClass {
    /// B0 with B0bar.
    #[serde(rename = "OF")]
    Of,
    /// B0 B0 or B0bar B0bar.
    #[serde(rename = "SF")]
    Sf,
}

impl FlavourClass {
    pub fn flipped(self) -> Self {
        match self {
            FlavourClass::Of => FlavourClass::Sf,
            FlavourClass::Sf => FlavourClass::Of,
        }
    }

    fn sign(self) -> f64 {
        match self {
            FlavourClass::Of => 1.0,
            FlavourClass::Sf => -1.0,
        }
    }
}

impl fmt::Display for FlavourClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlavourClass::Of => "OF",
            FlavourClass::Sf => "SF",
        })
    }
}

impl FromStr for FlavourClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OF" => Ok(FlavourClass::Of),
            "SF" => Ok(FlavourClass::Sf),
            other => Err(Error::parse("flavour class", format!("expected OF or SF, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryBand {
    pub lower: f64,
    pub upper: f64,
}

impl AsymmetryBand {
    pub fn contains(&self, a: f64) -> bool {
        self.lower <= a && a <= self.upper
    }

    /// Signed distance from `a` to the band; zero inside.
    pub fn residual(&self, a: f64) -> f64 {
        if a > self.upper {
            a - self.upper
        } else if a < self.lower {
            a - self.lower
        } else {
            0.0
        }
    }
}

fn check_time(name: &str, t: f64) -> Result<()> {
    if t >= 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be a finite time >= 0 ps, got {t}")))
    }
}

/// Decay-rate density for two flavour-specific decays separated by `dt`.
pub fn rate_qm(dt: f64, cls: FlavourClass, p: &ModelParams) -> Result<f64> {
    check_time("dt", dt)?;
    Ok((-dt / p.tau).exp() / (4.0 * p.tau) * (1.0 + cls.sign() * (p.dm * dt).cos()))
}

pub fn asym_qm(dt: f64, p: &ModelParams) -> Result<f64> {
    check_time("dt", dt)?;
    Ok((p.dm * dt).cos())
}

/// Disentangled-pair asymmetry as a function of both decay times.
pub fn asym_sd_joint(t1: f64, t2: f64, p: &ModelParams) -> Result<f64> {
    check_time("t1", t1)?;
    check_time("t2", t2)?;
    Ok((p.dm * t1).cos() * (p.dm * t2).cos())
}

/// Averages `joint(t_min, dt)` over `t_min` with weight `exp(-2 t_min / tau)`.
pub fn marginalize<F>(joint: F, dt: f64, p: &ModelParams) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    marginalize_with_breaks(joint, dt, p, &[])
}

/// As [`marginalize`], with `t_min` values where `joint` has kinks.
pub fn marginalize_with_breaks<F>(joint: F, dt: f64, p: &ModelParams, breaks: &[f64]) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    check_time("dt", dt)?;
    let rate = 2.0 / p.tau;
    let span = MARGINAL_SPAN_TAUS * p.tau;
    let est = quad::integrate(
        |u| joint(u, dt) * rate * (-rate * u).exp(),
        0.0,
        span,
        breaks,
        QuadOptions::abs(MARGINAL_ABS_TOL),
    )?;
    // Tail beyond the span, bounded by |joint| at the cut times exp(-2 span / tau).
    let tail = joint(span, dt).abs().max(1.0) * (-rate * span).exp();
    if tail > 1e-12 {
        return Err(Error::Quadrature {
            estimate: est.value,
            error: est.error + tail,
            intervals: 0,
        });
    }
    Ok(est.value)
}

/// Closed form of the SD asymmetry averaged over `t_min` at fixed `dt`.
pub fn asym_sd_marginal(dt: f64, p: &ModelParams) -> Result<f64> {
    check_time("dt", dt)?;
    let x = p.dm * p.tau;
    let (s, c) = (p.dm * dt).sin_cos();
    Ok(0.5 * (c + (c - x * s) / (1.0 + x * x)))
}

fn ps_psi(x_min: f64, c: f64, s: f64) -> f64 {
    (1.0 + c) * x_min.cos() - s * x_min.sin()
}

fn ps_upper_raw(x_min: f64, c: f64, s: f64) -> f64 {
    1.0 - ((1.0 - c) * x_min.cos() + s * x_min.sin()).abs()
}

fn ps_lower_raw(x_min: f64, c: f64, s: f64) -> f64 {
    let psi = ps_psi(x_min, c, s);
    1.0 - (2.0 + psi).min(2.0 - psi)
}

/// PS band at fixed `(t_min, dt)`.
pub fn ps_bounds_joint(t_min: f64, dt: f64, p: &ModelParams) -> Result<AsymmetryBand> {
    check_time("t_min", t_min)?;
    check_time("dt", dt)?;
    let (s, c) = (p.dm * dt).sin_cos();
    let x = p.dm * t_min;
    Ok(AsymmetryBand {
        lower: ps_lower_raw(x, c, s),
        upper: ps_upper_raw(x, c, s),
    })
}

/// `t_min` values in `[0, span]` where `a cos(dm u) + b sin(dm u)` changes sign.
fn sinusoid_zeros(a: f64, b: f64, dm: f64, span: f64) -> Vec<f64> {
    if a == 0.0 && b == 0.0 {
        return Vec::new();
    }
    // a cos x + b sin x = r cos(x - phi)
    let phi = b.atan2(a);
    let mut x = phi + FRAC_PI_2;
    while x > 0.0 {
        x -= PI;
    }
    let mut out = Vec::new();
    while x / dm <= span {
        if x > 0.0 {
            out.push(x / dm);
        }
        x += PI;
    }
    out
}

/// PS band averaged over `t_min` at fixed `dt`.
pub fn ps_bounds_marginal(dt: f64, p: &ModelParams) -> Result<AsymmetryBand> {
    check_time("dt", dt)?;
    let (s, c) = (p.dm * dt).sin_cos();
    let span = MARGINAL_SPAN_TAUS * p.tau;
    let dm = p.dm;
    let upper_kinks = sinusoid_zeros(1.0 - c, s, dm, span);
    let lower_kinks = sinusoid_zeros(1.0 + c, -s, dm, span);
    let upper = marginalize_with_breaks(|u, _| ps_upper_raw(dm * u, c, s), dt, p, &upper_kinks)?;
    let lower = marginalize_with_breaks(|u, _| ps_lower_raw(dm * u, c, s), dt, p, &lower_kinks)?;
    Ok(AsymmetryBand { lower, upper })
}

/// `(1 - zeta) A_QM + zeta A_SD`.
pub fn asym_decohered(dt: f64, p: &ModelParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&p.zeta) {
        return Err(Error::invalid(format!("zeta must lie in [0, 1], got {}", p.zeta)));
    }
    mix_qm_sd(dt, p, p.zeta)
}

/// Linear QM/SD mixture without the [0, 1] restriction on the weight; fits may
/// float the fraction outside the physical range.
pub(crate) fn mix_qm_sd(dt: f64, p: &ModelParams, zeta: f64) -> Result<f64> {
    Ok((1.0 - zeta) * asym_qm(dt, p)? + zeta * asym_sd_marginal(dt, p)?)
}

/// Generating models for toy pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Qm,
    Sd,
    PsBoundaryMax,
    PsBoundaryMin,
    Decohered,
}

impl Model {
    pub const ALL: [Model; 5] = [
        Model::Qm,
        Model::Sd,
        Model::PsBoundaryMax,
        Model::PsBoundaryMin,
        Model::Decohered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Model::Qm => "qm",
            Model::Sd => "sd",
            Model::PsBoundaryMax => "ps_boundary_max",
            Model::PsBoundaryMin => "ps_boundary_min",
            Model::Decohered => "decohered",
        }
    }

    /// Asymmetry at fixed decay times, for a pure (non-mixture) model.
    ///
    /// `Decohered` is a per-pair mixture and has no single joint asymmetry; it
    /// returns the QM/SD average weighted by zeta, which gives the correct
    /// class probability when the pair's own mixture choice is not tracked.
    pub fn pair_asymmetry(self, t1: f64, t2: f64, p: &ModelParams) -> f64 {
        let dt = (t1 - t2).abs();
        let t_min = t1.min(t2);
        match self {
            Model::Qm => (p.dm * dt).cos(),
            Model::Sd => (p.dm * t1).cos() * (p.dm * t2).cos(),
            Model::PsBoundaryMax | Model::PsBoundaryMin => {
                let (s, c) = (p.dm * dt).sin_cos();
                if self == Model::PsBoundaryMax {
                    ps_upper_raw(p.dm * t_min, c, s)
                } else {
                    ps_lower_raw(p.dm * t_min, c, s)
                }
            }
            Model::Decohered => {
                (1.0 - p.zeta) * (p.dm * dt).cos() + p.zeta * (p.dm * t1).cos() * (p.dm * t2).cos()
            }
        }
    }

    /// Measurable asymmetry at fixed `dt`.
    pub fn marginal_asymmetry(self, dt: f64, p: &ModelParams) -> Result<f64> {
        match self {
            Model::Qm => asym_qm(dt, p),
            Model::Sd => asym_sd_marginal(dt, p),
            Model::PsBoundaryMax => Ok(ps_bounds_marginal(dt, p)?.upper),
            Model::PsBoundaryMin => Ok(ps_bounds_marginal(dt, p)?.lower),
            Model::Decohered => asym_decohered(dt, p),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::parse("model", format!("unknown generating model {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub dt: f64,
    pub a_qm: f64,
    pub a_sd: f64,
    pub ps_min: f64,
    pub ps_max: f64,
}

/// Evenly spaced `dt` grid including both ends (up to rounding of `step`).
pub fn grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("grid step must be > 0, got {step}")));
    }
    if !(start >= 0.0 && stop >= start && stop.is_finite()) {
        return Err(Error::invalid(format!("grid range [{start}, {stop}] must satisfy 0 <= start <= stop")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

pub fn curve_rows(dts: &[f64], p: &ModelParams) -> Result<Vec<CurveRow>> {
    dts.iter()
        .map(|&dt| {
            let band = ps_bounds_marginal(dt, p)?;
            Ok(CurveRow {
                dt,
                a_qm: asym_qm(dt, p)?,
                a_sd: asym_sd_marginal(dt, p)?,
                ps_min: band.lower,
                ps_max: band.upper,
            })
        })
        .collect()
}

pub fn write_curves<W: Write>(out: W, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;

    fn nominal() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn rate_at_zero() {
        let p = nominal();
        assert!((rate_qm(0.0, FlavourClass::Of, &p).unwrap() - 1.0 / (2.0 * 1.53)).abs() < 1e-15);
        assert_eq!(rate_qm(0.0, FlavourClass::Sf, &p).unwrap(), 0.0);
        assert!(rate_qm(-0.1, FlavourClass::Of, &p).is_err());
    }

    #[test]
    fn rate_at_two_ps_matches_normalized_density() {
        let p = nominal();
        // Build the OF density by direct numerical normalization of the unnormalized shape.
        let shape = |t: f64| (-t / 1.53).exp() * (1.0 + (0.507 * t).cos());
        let both = |t: f64| 2.0 * (-t / 1.53).exp();
        let norm = integrate(both, 0.0, 80.0, &[], QuadOptions::abs(1e-13)).unwrap().value;
        // total rate integrates to 1/2 per ordering
        let expected = shape(2.0) / norm / 2.0;
        let got = rate_qm(2.0, FlavourClass::Of, &p).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.067_577).abs() < 1e-5);
    }

    #[test]
    fn qm_asymmetry_examples() {
        let p = nominal();
        assert_eq!(asym_qm(0.0, &p).unwrap(), 1.0);
        assert!((asym_qm(PI / 0.507, &p).unwrap() + 1.0).abs() < 1e-15);
        let of = rate_qm(3.0, FlavourClass::Of, &p).unwrap();
        let sf = rate_qm(3.0, FlavourClass::Sf, &p).unwrap();
        assert!(((of - sf) / (of + sf) - 1.521f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn sd_joint_forms_agree() {
        let p = nominal();
        assert_eq!(asym_sd_joint(0.0, 0.0, &p).unwrap(), 1.0);
        assert!((asym_sd_joint(PI / 0.507, 0.0, &p).unwrap() + 1.0).abs() < 1e-15);
        let (t1, t2): (f64, f64) = (1.2, 3.4);
        let sum_form = 0.5 * ((0.507 * (t1 + t2)).cos() + (0.507 * (t1 - t2)).cos());
        assert!((asym_sd_joint(t1, t2, &p).unwrap() - sum_form).abs() < 1e-12);
        assert!(asym_sd_joint(-1.0, 0.0, &p).is_err());
    }

    #[test]
    fn marginal_of_constant() {
        let p = nominal();
        for dt in [0.0, 1.0, 7.5] {
            assert!((marginalize(|_, _| 0.37, dt, &p).unwrap() - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_sd_at_zero() {
        let p = nominal();
        let x: f64 = 0.507 * 1.53;
        let closed = 0.5 * (1.0 + 1.0 / (1.0 + x * x));
        assert!((closed - 0.8122).abs() < 5e-5);
        let numeric = marginalize(|u, dt| (0.507 * u).cos() * (0.507 * (u + dt)).cos(), 0.0, &p).unwrap();
        assert!((numeric - closed).abs() < 1e-9);
        assert!((asym_sd_marginal(0.0, &p).unwrap() - closed).abs() < 1e-15);
    }

    #[test]
    fn laplace_type_integral() {
        let p = nominal();
        let x: f64 = 0.507 * 1.53;
        for dt in [0.0, 0.7, 3.3, 11.0] {
            let numeric = marginalize(|u, dt| (0.507 * (dt + 2.0 * u)).cos(), dt, &p).unwrap();
            let (s, c) = (0.507f64 * dt).sin_cos();
            let closed = (c - x * s) / (1.0 + x * x);
            assert!((numeric - closed).abs() < 1e-9, "dt={dt}");
        }
    }

    #[test]
    fn ps_band_at_zero_dt() {
        let p = nominal();
        for t_min in [0.0, 0.4, 2.0, 9.0] {
            assert_eq!(ps_bounds_joint(t_min, 0.0, &p).unwrap().upper, 1.0);
        }
        let b = ps_bounds_joint(0.0, 0.0, &p).unwrap();
        assert_eq!(b.lower, 1.0);
        let m = ps_bounds_marginal(0.0, &p).unwrap();
        assert!((m.upper - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ps_lower_at_zero_dt_is_cos_average() {
        let p = nominal();
        // at dt = 0, lower = 1 - (2 - 2|cos x|) = 2|cos(dm u)| - 1
        let m = ps_bounds_marginal(0.0, &p).unwrap();
        let kinks: Vec<f64> = (0..40).map(|k| (k as f64 + 0.5) * PI / 0.507).collect();
        let direct = integrate(
            |u| (2.0 * (0.507 * u).cos().abs() - 1.0) * (2.0 / 1.53) * (-2.0 * u / 1.53).exp(),
            0.0,
            80.0,
            &kinks,
            QuadOptions::abs(1e-13),
        )
        .unwrap()
        .value;
        assert!((m.lower - direct).abs() < 1e-9);
    }

    #[test]
    fn ps_min_identity_at_fixed_point() {
        let p = nominal();
        let b = ps_bounds_joint(1.0, 2.0, &p).unwrap();
        let (s, c) = (0.507f64 * 2.0).sin_cos();
        let psi = (1.0 + c) * 0.507f64.cos() - s * 0.507f64.sin();
        assert!((b.lower - (1.0 - (2.0 - psi.abs()))).abs() < 1e-15);
        assert!(b.lower <= b.upper);
    }

    #[test]
    fn decohered_limits() {
        let p = nominal();
        for dt in [0.0, 1.5, 6.0] {
            assert_eq!(asym_decohered(dt, &p).unwrap(), asym_qm(dt, &p).unwrap());
            let sd = p.with_zeta(1.0);
            assert!((asym_decohered(dt, &sd).unwrap() - asym_sd_marginal(dt, &p).unwrap()).abs() < 1e-15);
        }
        let v = asym_decohered(0.0, &p.with_zeta(0.029)).unwrap();
        let expected = 0.971 + 0.029 * asym_sd_marginal(0.0, &p).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.99455).abs() < 1e-5);
        assert!(asym_decohered(0.0, &ModelParams { zeta: 1.2, ..p }).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(0.5, 1.5, 0.0).is_ok());
        assert!(ModelParams::new(0.0, 1.5, 0.0).is_err());
        assert!(ModelParams::new(0.5, -1.0, 0.0).is_err());
        assert!(ModelParams::new(0.5, 1.5, -0.1).is_err());
    }

    #[test]
    fn grid_row_count() {
        assert_eq!(grid(0.0, 20.0, 0.1).unwrap().len(), 201);
        assert!(grid(0.0, 20.0, 0.0).is_err());
    }

    #[test]
    fn band_residual_clipping() {
        let b = AsymmetryBand { lower: -0.2, upper: 0.3 };
        assert_eq!(b.residual(0.0), 0.0);
        assert!((b.residual(0.5) - 0.2).abs() < 1e-15);
        assert!((b.residual(-0.5) + 0.3).abs() < 1e-15);
    }
}
