//! Truncated-SVD unfolding of reconstructed OF/SF spectra.
//!
//! Unknowns are the ratios of the true spectrum to the MC a-priori spectrum;
//! the reconstructed rows are scaled by the prior-predicted counts so each has
//! roughly unit Poisson variance. Truncating to the leading `k` singular
//! components then regularizes towards the a-priori shape.
//!
//! Before unfolding, each class is mixed with a fraction of the other
//! (`OF + s SF`, `SF + o OF`) in both the data and the response; the exact
//! inverse mixing is applied afterwards.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{AsymmetrySpectrum, BinnedCounts, Binning};
use crate::error::{Error, Result};
use crate::models::FlavourClass;
use crate::toygen::EventRecord;

const MIN_SINGULAR_VALUE: f64 = 1e-12;
/// Diagonal term that makes the curvature matrix invertible.
pub const CURVATURE_XI: f64 = 1e-3;

/// Basis in which singular components are ranked and truncated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// Components of `A C^-1` with `C` the second-difference matrix, so the
    /// kept components are the smoothest deviations from the a-priori.
    #[default]
    Curvature,
    /// Components of `A` itself.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnfoldConfig {
    pub rank_of: usize,
    pub rank_sf: usize,
    /// Fraction of SF added to OF.
    pub mix_s: f64,
    /// Fraction of OF added to SF.
    pub mix_o: f64,
    pub regularization: Regularization,
}

impl Default for UnfoldConfig {
    fn default() -> Self {
        Self {
            rank_of: 5,
            rank_sf: 6,
            mix_s: 0.2,
            mix_o: 0.2,
            regularization: Regularization::Curvature,
        }
    }
}

impl UnfoldConfig {
    /// Full rank, no mixing.
    pub fn plain(n_bins: usize) -> Self {
        Self {
            rank_of: n_bins,
            rank_sf: n_bins,
            mix_s: 0.0,
            mix_o: 0.0,
            regularization: Regularization::Curvature,
        }
    }

    pub fn validate(&self, n_bins: usize) -> Result<()> {
        for (name, r) in [("rank_of", self.rank_of), ("rank_sf", self.rank_sf)] {
            if r < 1 || r > n_bins {
                return Err(Error::invalid(format!("{name} = {r} outside [1, {n_bins}]")));
            }
        }
        for (name, f) in [("mix_s", self.mix_s), ("mix_o", self.mix_o)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("{name} = {f} outside [0, 1]")));
            }
        }
        if (self.mix_s * self.mix_o - 1.0).abs() < 1e-12 {
            return Err(Error::invalid("mix_s * mix_o = 1 makes de-mixing singular"));
        }
        Ok(())
    }

    pub fn rank(&self, cls: FlavourClass) -> usize {
        match cls {
            FlavourClass::Of => self.rank_of,
            FlavourClass::Sf => self.rank_sf,
        }
    }
}

/// Migration counts for one flavour class: entry `(r, g)` counts events
/// generated in truth bin `g` and reconstructed in bin `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    pub class: FlavourClass,
    pub binning: Binning,
    pub counts: DMatrix<f64>,
    /// Generated events per truth bin, including those reconstructed outside the binning.
    pub truth_totals: Vec<f64>,
    /// Events whose true `dt` lies outside the binning.
    pub overflow: u64,
}

impl ResponseMatrix {
    pub fn empty(class: FlavourClass, binning: &Binning) -> Self {
        let n = binning.len();
        Self {
            class,
            binning: binning.clone(),
            counts: DMatrix::zeros(n, n),
            truth_totals: vec![0.0; n],
            overflow: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.truth_totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth_totals.is_empty()
    }

    /// Reconstruction probabilities `P(r | g)`; columns with no MC are zero.
    pub fn probabilities(&self) -> DMatrix<f64> {
        let mut p = self.counts.clone();
        for (g, &t) in self.truth_totals.iter().enumerate() {
            let scale = if t > 0.0 { 1.0 / t } else { 0.0 };
            p.column_mut(g).scale_mut(scale);
        }
        p
    }

    /// `self + f * other`, entry by entry, keeping `self`'s class.
    pub fn mixed_with(&self, other: &ResponseMatrix, f: f64) -> Result<ResponseMatrix> {
        if self.binning != other.binning {
            return Err(Error::BinningMismatch("response matrices use different binnings".into()));
        }
        Ok(ResponseMatrix {
            class: self.class,
            binning: self.binning.clone(),
            counts: &self.counts + &other.counts * f,
            truth_totals: self.truth_totals.iter().zip(&other.truth_totals).map(|(a, b)| a + f * b).collect(),
            overflow: self.overflow,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.binning.len();
        if self.counts.shape() != (n, n) || self.truth_totals.len() != n {
            return Err(Error::BinningMismatch(format!(
                "response is {:?} with {} totals for {n} bins",
                self.counts.shape(),
                self.truth_totals.len()
            )));
        }
        if self.counts.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("response entries must be non-negative"));
        }
        for g in 0..n {
            let col: f64 = self.counts.column(g).sum();
            if col > self.truth_totals[g] * (1.0 + 1e-12) + 1e-9 {
                return Err(Error::invalid(format!(
                    "truth bin {g}: {col} reconstructed of {} generated",
                    self.truth_totals[g]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePair {
    pub of: ResponseMatrix,
    pub sf: ResponseMatrix,
}

impl ResponsePair {
    pub fn get(&self, cls: FlavourClass) -> &ResponseMatrix {
        match cls {
            FlavourClass::Of => &self.of,
            FlavourClass::Sf => &self.sf,
        }
    }

    /// Responses for the mixed samples `OF + s SF` and `SF + o OF`.
    pub fn mixed(&self, cfg: &UnfoldConfig) -> Result<ResponsePair> {
        Ok(ResponsePair {
            of: self.of.mixed_with(&self.sf, cfg.mix_s)?,
            sf: self.sf.mixed_with(&self.of, cfg.mix_o)?,
        })
    }
}

/// Fills OF and SF responses from MC events by true class.
///
/// Flavour mistagging is corrected on the counts before unfolding, so the
/// assigned class is not used here.
pub fn build_response<'a, I>(events: I, binning: &Binning) -> ResponsePair
where
    I: IntoIterator<Item = &'a EventRecord>,
{
    let mut pair = ResponsePair {
        of: ResponseMatrix::empty(FlavourClass::Of, binning),
        sf: ResponseMatrix::empty(FlavourClass::Sf, binning),
    };
    for e in events {
        let r = match e.cls_true {
            FlavourClass::Of => &mut pair.of,
            FlavourClass::Sf => &mut pair.sf,
        };
        let Some(g) = binning.find(e.dt_true) else {
            r.overflow += 1;
            continue;
        };
        r.truth_totals[g] += 1.0;
        if let Some(k) = binning.find(e.dt_rec) {
            r.counts[(k, g)] += 1.0;
        }
    }
    pair
}

/// `(of + s sf, sf + o of)`.
pub fn mix_vectors(of: &[f64], sf: &[f64], s: f64, o: f64) -> (Vec<f64>, Vec<f64>) {
    let of_m = of.iter().zip(sf).map(|(a, b)| a + s * b).collect();
    let sf_m = sf.iter().zip(of).map(|(a, b)| a + o * b).collect();
    (of_m, sf_m)
}

/// Exact inverse of [`mix_vectors`].
pub fn demix_vectors(of_m: &[f64], sf_m: &[f64], s: f64, o: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = 1.0 - s * o;
    if d.abs() < 1e-12 {
        return Err(Error::invalid("mix_s * mix_o = 1 makes de-mixing singular"));
    }
    let of = of_m.iter().zip(sf_m).map(|(a, b)| (a - s * b) / d).collect();
    let sf = sf_m.iter().zip(of_m).map(|(a, b)| (a - o * b) / d).collect();
    Ok((of, sf))
}

/// Stacked `[of; sf]` mixing matrix.
fn mixing_matrix(n: usize, s: f64, o: f64) -> DMatrix<f64> {
    let mut m = DMatrix::identity(2 * n, 2 * n);
    for i in 0..n {
        m[(i, n + i)] = s;
        m[(n + i, i)] = o;
    }
    m
}

fn stacked_cov(c: &BinnedCounts) -> DMatrix<f64> {
    let n = c.len();
    let mut v = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        v[(i, i)] = c.var_of[i];
        v[(n + i, n + i)] = c.var_sf[i];
        v[(i, n + i)] = c.cov_of_sf[i];
        v[(n + i, i)] = c.cov_of_sf[i];
    }
    v
}

fn counts_from_stacked(binning: &Binning, x: &DVector<f64>, cov: &DMatrix<f64>) -> BinnedCounts {
    let n = binning.len();
    BinnedCounts {
        binning: binning.clone(),
        n_of: (0..n).map(|i| x[i]).collect(),
        n_sf: (0..n).map(|i| x[n + i]).collect(),
        var_of: (0..n).map(|i| cov[(i, i)]).collect(),
        var_sf: (0..n).map(|i| cov[(n + i, n + i)]).collect(),
        cov_of_sf: (0..n).map(|i| cov[(i, n + i)]).collect(),
        overflow: 0,
    }
}

/// Mixes both classes of `c`, propagating the covariance.
pub fn mix_counts(c: &BinnedCounts, s: f64, o: f64) -> BinnedCounts {
    let n = c.len();
    let m = mixing_matrix(n, s, o);
    let x = DVector::from_iterator(2 * n, c.n_of.iter().chain(&c.n_sf).copied());
    let mut out = counts_from_stacked(&c.binning, &(&m * x), &(&m * stacked_cov(c) * m.transpose()));
    out.overflow = c.overflow;
    out
}

/// Single-class result of a truncated-SVD unfolding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassUnfold {
    pub truth: Vec<f64>,
    /// d truth / d measured.
    pub jacobian: DMatrix<f64>,
    /// Singular values of the scaled system, descending.
    pub singular_values: Vec<f64>,
    /// `|| D (P x - m) ||` with the row scaling `D` used in the fit.
    pub residual_norm: f64,
}

/// Second-difference matrix with `xi` added to the diagonal.
pub fn curvature_matrix(n: usize, xi: f64) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = -2.0 + xi;
        if i > 0 {
            c[(i, i - 1)] = 1.0;
        }
        if i + 1 < n {
            c[(i, i + 1)] = 1.0;
        }
    }
    if n > 1 {
        c[(0, 0)] = -1.0 + xi;
        c[(n - 1, n - 1)] = -1.0 + xi;
    } else {
        c[(0, 0)] = xi;
    }
    c
}

/// Unfolds one measured spectrum with the leading `rank` singular components.
pub fn svd_unfold_class(measured: &[f64], resp: &ResponseMatrix, rank: usize, reg: Regularization) -> Result<ClassUnfold> {
    resp.validate()?;
    let n = resp.len();
    if measured.len() != n {
        return Err(Error::BinningMismatch(format!("{} measured bins for a {n}-bin response", measured.len())));
    }
    if rank < 1 || rank > n {
        return Err(Error::invalid(format!("rank {rank} outside [1, {n}]")));
    }
    if let Some(g) = resp.truth_totals.iter().position(|&t| !(t > 0.0)) {
        return Err(Error::invalid(format!("truth bin {g} has no MC events for the a-priori")));
    }
    let p = resp.probabilities();
    let m = DVector::from_column_slice(measured);
    let prior_raw = DVector::from_column_slice(&resp.truth_totals);
    let predicted_raw = &p * &prior_raw;
    let total_pred = predicted_raw.sum();
    let total_meas = m.sum();
    let norm = if total_pred > 0.0 && total_meas > 0.0 { total_meas / total_pred } else { 1.0 };
    let prior = prior_raw * norm;
    let predicted = predicted_raw * norm;
    let d = DVector::from_iterator(n, predicted.iter().map(|&v| if v > 0.0 { v.sqrt().recip() } else { 1.0 }));

    // A = D P diag(prior)
    let mut a = p.clone();
    for g in 0..n {
        a.column_mut(g).scale_mut(prior[g]);
    }
    for r in 0..n {
        a.row_mut(r).scale_mut(d[r]);
    }
    // deviations w - 1 = B z, with B the inverse curvature for the smooth basis
    let basis = match reg {
        Regularization::Plain => DMatrix::identity(n, n),
        Regularization::Curvature => curvature_matrix(n, CURVATURE_XI)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("curvature matrix is singular".into()))?,
    };
    let ab = &a * &basis;
    let svd = ab.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    // descending, ties by index
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if singular_values[rank - 1] < MIN_SINGULAR_VALUE {
        return Err(Error::Numerical(format!(
            "singular value {} at rank {rank} is below {MIN_SINGULAR_VALUE:e}",
            singular_values[rank - 1]
        )));
    }
    let mut pinv = DMatrix::zeros(n, n);
    for &j in &order[..rank] {
        let vj = v_t.row(j).transpose();
        let uj = u.column(j);
        pinv += (vj * uj.transpose()) / svd.singular_values[j];
    }
    // w = 1 + B (A B)_k^+ (D m - A 1), x = prior * w
    let pinv = basis * pinv;
    let dm = d.component_mul(&m);
    let ones = DVector::from_element(n, 1.0);
    let w = &ones + &pinv * (&dm - &a * &ones);
    let truth: Vec<f64> = (0..n).map(|g| prior[g] * w[g]).collect();
    let mut jacobian = pinv;
    for g in 0..n {
        jacobian.row_mut(g).scale_mut(prior[g]);
    }
    for r in 0..n {
        jacobian.column_mut(r).scale_mut(d[r]);
    }
    let x = DVector::from_column_slice(&truth);
    let residual_norm = d.component_mul(&(&p * x - &m)).norm();
    Ok(ClassUnfold {
        truth,
        jacobian,
        singular_values,
        residual_norm,
    })
}

/// Truth-level counts with the full stacked `[of; sf]` covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Unfolded {
    pub counts: BinnedCounts,
    pub covariance: DMatrix<f64>,
    pub of: ClassUnfold,
    pub sf: ClassUnfold,
}

impl Unfolded {
    /// Asymmetry of the unfolded counts with its full statistical covariance.
    pub fn asymmetry(&self) -> Result<AsymmetrySpectrum> {
        asymmetry_with_covariance(&self.counts, &self.covariance)
    }
}

/// `(o - s)/(o + s)` per bin, propagating a stacked `[of; sf]` covariance.
pub fn asymmetry_with_covariance(c: &BinnedCounts, cov: &DMatrix<f64>) -> Result<AsymmetrySpectrum> {
    let n = c.len();
    if cov.shape() != (2 * n, 2 * n) {
        return Err(Error::BinningMismatch(format!("covariance {:?} for {n} bins", cov.shape())));
    }
    let mut jac = DMatrix::zeros(n, 2 * n);
    let mut a = Vec::with_capacity(n);
    for i in 0..n {
        let (o, s) = (c.n_of[i], c.n_sf[i]);
        let t = o + s;
        if !(t > 0.0) {
            return Err(Error::EmptyBin { bin: i });
        }
        a.push((o - s) / t);
        jac[(i, i)] = 2.0 * s / (t * t);
        jac[(i, n + i)] = -2.0 * o / (t * t);
    }
    let acov = &jac * cov * jac.transpose();
    let err = (0..n).map(|i| acov[(i, i)].max(0.0).sqrt()).collect();
    let mut spec = AsymmetrySpectrum::new(c.binning.clone(), a, err)?;
    spec.stat_cov = Some(0.5 * (&acov + acov.transpose()));
    Ok(spec)
}

/// Mixes, unfolds each class at its configured rank, and de-mixes.
pub fn dsvd_unfold(measured: &BinnedCounts, resp: &ResponsePair, cfg: &UnfoldConfig) -> Result<Unfolded> {
    let n = measured.len();
    cfg.validate(n)?;
    if measured.binning != resp.of.binning || measured.binning != resp.sf.binning {
        return Err(Error::BinningMismatch("measured counts and response use different binnings".into()));
    }
    let mixed = mix_counts(measured, cfg.mix_s, cfg.mix_o);
    let mresp = resp.mixed(cfg)?;
    let of = svd_unfold_class(&mixed.n_of, &mresp.of, cfg.rank_of, cfg.regularization)?;
    let sf = svd_unfold_class(&mixed.n_sf, &mresp.sf, cfg.rank_sf, cfg.regularization)?;
    let (t_of, t_sf) = demix_vectors(&of.truth, &sf.truth, cfg.mix_s, cfg.mix_o)?;

    let mix = mixing_matrix(n, cfg.mix_s, cfg.mix_o);
    let demix = mix.clone().try_inverse().ok_or_else(|| Error::Numerical("mixing matrix is singular".into()))?;
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&of.jacobian);
    block.view_mut((n, n), (n, n)).copy_from(&sf.jacobian);
    let lin = &demix * block * &mix;
    let cov = &lin * stacked_cov(measured) * lin.transpose();
    let covariance = 0.5 * (&cov + cov.transpose());
    let x = DVector::from_iterator(2 * n, t_of.into_iter().chain(t_sf));
    Ok(Unfolded {
        counts: counts_from_stacked(&measured.binning, &x, &covariance),
        covariance,
        of,
        sf,
    })
}

/// Unfolded asymmetries of one generating model's pseudo-experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEnsemble {
    pub label: String,
    /// Expected truth-level asymmetry per bin.
    pub truth: Vec<f64>,
    /// One unfolded asymmetry vector per replica.
    pub unfolded: Vec<Vec<f64>>,
}

impl ModelEnsemble {
    pub fn mean_bias(&self) -> Vec<f64> {
        let n = self.truth.len();
        let k = self.unfolded.len() as f64;
        (0..n)
            .map(|i| self.unfolded.iter().map(|u| u[i] - self.truth[i]).sum::<f64>() / k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrection {
    /// Subtracted from unfolded asymmetries.
    pub correction: Vec<f64>,
    /// Largest remaining |mean corrected - truth| over the models.
    pub systematic: Vec<f64>,
    pub per_model_bias: Vec<(String, Vec<f64>)>,
}

impl BiasCorrection {
    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.correction).map(|(a, c)| a - c).collect()
    }
}

/// Model-averaged bias and the residual model spread.
pub fn bias_correct(ensembles: &[ModelEnsemble], min_replicas: usize) -> Result<BiasCorrection> {
    let first = ensembles.first().ok_or_else(|| Error::invalid("bias correction needs at least one model ensemble"))?;
    let n = first.truth.len();
    for e in ensembles {
        if e.unfolded.len() < min_replicas.max(1) {
            return Err(Error::invalid(format!(
                "ensemble {} has {} replicas, need {min_replicas}",
                e.label,
                e.unfolded.len()
            )));
        }
        if e.truth.len() != n || e.unfolded.iter().any(|u| u.len() != n) {
            return Err(Error::BinningMismatch(format!("ensemble {} has inconsistent bin counts", e.label)));
        }
    }
    let per_model_bias: Vec<(String, Vec<f64>)> = ensembles.iter().map(|e| (e.label.clone(), e.mean_bias())).collect();
    let k = ensembles.len() as f64;
    let correction: Vec<f64> = (0..n).map(|i| per_model_bias.iter().map(|(_, b)| b[i]).sum::<f64>() / k).collect();
    let systematic = (0..n)
        .map(|i| {
            per_model_bias
                .iter()
                .map(|(_, b)| (b[i] - correction[i]).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(BiasCorrection {
        correction,
        systematic,
        per_model_bias,
    })
}

/// Writes a response as flexible CSV: metadata rows, then one row per reco bin.
pub fn write_response<W: Write>(out: W, r: &ResponseMatrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).has_headers(false).from_writer(out);
    w.write_record(["class", &r.class.to_string()])?;
    w.write_record(["binning", &r.binning.fingerprint()])?;
    let row = |key: &str, v: &[f64]| -> Vec<String> { std::iter::once(key.to_string()).chain(v.iter().map(f64::to_string)).collect() };
    w.write_record(row("edges", r.binning.edges()))?;
    w.write_record(row("truth_totals", &r.truth_totals))?;
    w.write_record(["overflow", &r.overflow.to_string()])?;
    let header: Vec<String> = std::iter::once("reco\\truth".to_string()).chain((1..=r.len()).map(|g| g.to_string())).collect();
    w.write_record(header)?;
    for k in 0..r.len() {
        let vals: Vec<f64> = r.counts.row(k).iter().copied().collect();
        w.write_record(row(&(k + 1).to_string(), &vals))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_response<R: Read>(input: R) -> Result<ResponseMatrix> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).has_headers(false).trim(csv::Trim::All).from_reader(input);
    let rows: Vec<csv::StringRecord> = rd.records().collect::<std::result::Result<_, _>>()?;
    let field = |i: usize, key: &str| -> Result<&csv::StringRecord> {
        let r = rows.get(i).ok_or_else(|| Error::parse(format!("response line {}", i + 1), "missing"))?;
        if r.get(0) != Some(key) {
            return Err(Error::parse(format!("response line {}", i + 1), format!("expected {key:?}")));
        }
        Ok(r)
    };
    let floats = |r: &csv::StringRecord, line: usize| -> Result<Vec<f64>> {
        r.iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(|e| Error::parse(format!("response line {line}"), format!("{f:?}: {e}"))))
            .collect()
    };
    let class: FlavourClass = field(0, "class")?.get(1).unwrap_or_default().parse()?;
    let hash = field(1, "binning")?.get(1).unwrap_or_default().to_string();
    let binning = Binning::new(floats(field(2, "edges")?, 3)?)?;
    if binning.fingerprint() != hash {
        return Err(Error::parse("response line 2", "binning hash does not match edges"));
    }
    let truth_totals = floats(field(3, "truth_totals")?, 4)?;
    let overflow = field(4, "overflow")?
        .get(1)
        .unwrap_or_default()
        .parse::<u64>()
        .map_err(|e| Error::parse("response line 5", e.to_string()))?;
    let n = binning.len();
    if rows.len() != 6 + n {
        return Err(Error::parse("response", format!("expected {n} matrix rows, found {}", rows.len().saturating_sub(6))));
    }
    let mut counts = DMatrix::zeros(n, n);
    for k in 0..n {
        let v = floats(&rows[6 + k], 7 + k)?;
        if v.len() != n {
            return Err(Error::parse(format!("response line {}", 7 + k), format!("expected {n} entries")));
        }
        for g in 0..n {
            counts[(k, g)] = v[g];
        }
    }
    let r = ResponseMatrix {
        class,
        binning,
        counts,
        truth_totals,
        overflow,
    };
    r.validate()?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_response(cls: FlavourClass, n: usize) -> ResponseMatrix {
        let b = Binning::new((0..=n).map(|i| i as f64).collect()).unwrap();
        let mut r = ResponseMatrix::empty(cls, &b);
        for g in 0..n {
            r.counts[(g, g)] = 100.0;
            r.truth_totals[g] = 100.0;
        }
        r
    }

    fn banded(cls: FlavourClass) -> ResponseMatrix {
        let mut r = diag_response(cls, 11);
        for g in 0..11 {
            r.truth_totals[g] = 1000.0 * (-(g as f64) / 3.0).exp();
            let t = r.truth_totals[g];
            r.counts[(g, g)] = 0.7 * t;
            if g > 0 {
                r.counts[(g - 1, g)] = 0.12 * t;
            }
            if g < 10 {
                r.counts[(g + 1, g)] = 0.15 * t;
            }
        }
        r
    }

    #[test]
    fn zero_smearing_gives_diagonal() {
        let b = Binning::default();
        let evs: Vec<EventRecord> = [0.2, 1.5, 1.7, 8.0]
            .iter()
            .map(|&dt| EventRecord::from_pair(dt, 0.0, FlavourClass::Of))
            .collect();
        let r = build_response(&evs, &b);
        assert_eq!(r.of.counts[(2, 2)], 2.0);
        assert_eq!(r.of.counts.sum(), 4.0);
        for k in 0..11 {
            for g in 0..11 {
                if k != g {
                    assert_eq!(r.of.counts[(k, g)], 0.0);
                }
            }
        }
        assert_eq!(r.sf.counts.sum(), 0.0);
    }

    #[test]
    fn identity_full_rank() {
        let r = diag_response(FlavourClass::Of, 4);
        let m = [5.0, 7.0, 0.5, 11.0];
        for (reg, tol) in [(Regularization::Plain, 1e-12), (Regularization::Curvature, 1e-9)] {
            let u = svd_unfold_class(&m, &r, 4, reg).unwrap();
            for (a, b) in u.truth.iter().zip(&m) {
                assert!((a - b).abs() < tol * b, "{reg:?}");
            }
            assert!((&u.jacobian - DMatrix::identity(4, 4)).abs().max() < tol);
        }
    }

    #[test]
    fn residual_non_increasing_in_rank() {
        let r = banded(FlavourClass::Of);
        let m: Vec<f64> = (0..11).map(|g| 400.0 * (-(g as f64) / 2.0).exp() + (g % 3) as f64 * 5.0).collect();
        for reg in [Regularization::Plain, Regularization::Curvature] {
            let norms: Vec<f64> = (1..=11).map(|k| svd_unfold_class(&m, &r, k, reg).unwrap().residual_norm).collect();
            assert!(norms.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{reg:?}: {norms:?}");
            assert!(norms[10] < 1e-8);
        }
    }

    #[test]
    fn noiseless_closure() {
        let r = banded(FlavourClass::Sf);
        let x: Vec<f64> = (0..11).map(|g| 50.0 + 13.0 * g as f64).collect();
        let m = r.probabilities() * DVector::from_column_slice(&x);
        let u = svd_unfold_class(m.as_slice(), &r, 11, Regularization::Curvature).unwrap();
        for (a, b) in u.truth.iter().zip(&x) {
            assert!((a - b).abs() < 1e-8 * b);
        }
    }

    #[test]
    fn rank_bounds_and_singular_values() {
        let r = banded(FlavourClass::Of);
        assert!(svd_unfold_class(&[1.0; 11], &r, 0, Regularization::Curvature).is_err());
        assert!(svd_unfold_class(&[1.0; 11], &r, 12, Regularization::Curvature).is_err());
        let mut degenerate = r.clone();
        degenerate.counts.column_mut(3).fill(0.0);
        assert!(matches!(svd_unfold_class(&[1.0; 11], &degenerate, 11, Regularization::Curvature), Err(Error::Numerical(_))));
        let u = svd_unfold_class(&[10.0; 11], &r, 5, Regularization::Curvature).unwrap();
        assert!(u.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn mixing_round_trip() {
        let of = [3.0, 0.0, 7.5];
        let sf = [0.0, 1.0, 2.25];
        let (a, b) = mix_vectors(&of, &sf, 0.2, 0.2);
        assert_eq!(a, vec![3.0, 0.2, 7.95]);
        let (x, y) = demix_vectors(&a, &b, 0.2, 0.2).unwrap();
        for (u, v) in x.iter().chain(&y).zip(of.iter().chain(&sf)) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(mix_vectors(&of, &sf, 0.0, 0.0), (of.to_vec(), sf.to_vec()));
        assert!(demix_vectors(&a, &b, 1.0, 1.0).is_err());
        assert!(UnfoldConfig { mix_s: 1.0, mix_o: 1.0, ..UnfoldConfig::default() }.validate(11).is_err());
    }

    #[test]
    fn identity_dsvd_covariance_is_input() {
        let b = Binning::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let resp = ResponsePair {
            of: ResponseMatrix { binning: b.clone(), ..diag_response(FlavourClass::Of, 3) },
            sf: ResponseMatrix { binning: b.clone(), ..diag_response(FlavourClass::Sf, 3) },
        };
        let c = BinnedCounts::from_counts(&b, vec![9.0, 4.0, 1.0], vec![1.0, 4.0, 9.0]).unwrap();
        for cfg in [UnfoldConfig::plain(3), UnfoldConfig { rank_of: 3, rank_sf: 3, ..UnfoldConfig::default() }] {
            let u = dsvd_unfold(&c, &resp, &cfg).unwrap();
            for i in 0..3 {
                assert!((u.counts.n_of[i] - c.n_of[i]).abs() < 1e-10);
                assert!((u.counts.var_sf[i] - c.var_sf[i]).abs() < 1e-10);
                assert!(u.counts.cov_of_sf[i].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bias_correction_recovers_shift() {
        let truth = vec![1.0, 0.5, -0.2];
        let shift = [0.03, -0.01, 0.02];
        let mk = |label: &str, extra: f64| ModelEnsemble {
            label: label.into(),
            truth: truth.clone(),
            unfolded: (0..10)
                .map(|k| {
                    let jitter = if k % 2 == 0 { 0.001 } else { -0.001 };
                    truth.iter().zip(&shift).map(|(t, s)| t + s + extra + jitter).collect()
                })
                .collect(),
        };
        let c = bias_correct(&[mk("a", 0.0), mk("b", 0.004), mk("c", -0.004)], 10).unwrap();
        for i in 0..3 {
            assert!((c.correction[i] - shift[i]).abs() < 1e-12);
            assert!((c.systematic[i] - 0.004).abs() < 1e-12);
        }
        assert!(bias_correct(&[mk("a", 0.0)], 11).is_err());
        assert!(bias_correct(&[], 1).is_err());
    }

    #[test]
    fn response_file_round_trip() {
        let r = banded(FlavourClass::Sf);
        let mut buf = Vec::new();
        write_response(&mut buf, &r).unwrap();
        assert_eq!(read_response(buf.as_slice()).unwrap(), r);
        let text = String::from_utf8(buf).unwrap().replacen("binning,", "binning,00", 1);
        assert!(read_response(text.as_bytes()).is_err());
    }
}
