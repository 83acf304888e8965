//! Binned OF/SF counting, background subtraction, mistag correction and the
//! asymmetry spectrum.
//!
//! Counts carry per-bin variances and the OF/SF covariance of the same bin, so
//! linear corrections (subtraction, mistag unfolding) propagate exactly.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FlavourClass, ModelParams};
use crate::toygen::{BackgroundConfig, Category, EventRecord, WhichDt};

pub const DEFAULT_EDGES: [f64; 12] = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 9.0, 13.0, 20.0];

/// Systematic column names, in file order.
pub const SOURCE_EVENT_SELECTION: &str = "event_sel";
pub const SOURCE_BACKGROUND: &str = "bkgd_sub";
pub const SOURCE_MISTAG: &str = "wrong_tags";
pub const SOURCE_DECONVOLUTION: &str = "deconvolution";

/// Event-selection systematic per bin of the published spectrum.
pub const TABLE1_EVENT_SELECTION: [f64; 11] = [0.005, 0.006, 0.013, 0.008, 0.009, 0.021, 0.020, 0.034, 0.041, 0.067, 0.145];

const BOOTSTRAP_RESAMPLES: usize = 2000;
const BOOTSTRAP_SEED: u64 = 0x5eed_b007;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Binning {
    edges: Vec<f64>,
}

impl Default for Binning {
    fn default() -> Self {
        Self {
            edges: DEFAULT_EDGES.to_vec(),
        }
    }
}

impl Binning {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        let b = Self { edges };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() < 2 {
            return Err(Error::invalid("binning needs at least two edges"));
        }
        if !(self.edges[0] >= 0.0) {
            return Err(Error::invalid(format!("first bin edge must be >= 0, got {}", self.edges[0])));
        }
        if let Some(w) = self.edges.windows(2).find(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::invalid(format!("bin edges must be strictly increasing: {} then {}", w[0], w[1])));
        }
        Ok(())
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.edges.windows(2).map(|w| (w[0], w[1]))
    }

    /// Bin containing `x` in `[first, last)`.
    pub fn find(&self, x: f64) -> Option<usize> {
        let (first, last) = (self.edges[0], *self.edges.last().expect("validated"));
        if !(x >= first && x < last) {
            return None;
        }
        Some(self.edges.partition_point(|&e| e <= x) - 1)
    }

    /// Stable textual fingerprint, used to tag serialized matrices.
    pub fn fingerprint(&self) -> String {
        // FNV-1a over the bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.edges {
            for b in e.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    fn ensure_same(&self, other: &Binning) -> Result<()> {
        if self != other {
            return Err(Error::BinningMismatch(format!("{:?} vs {:?}", self.edges, other.edges)));
        }
        Ok(())
    }
}

/// Per-bin OF and SF yields with their (bin-diagonal) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCounts {
    pub binning: Binning,
    pub n_of: Vec<f64>,
    pub n_sf: Vec<f64>,
    pub var_of: Vec<f64>,
    pub var_sf: Vec<f64>,
    /// Covariance between the OF and SF yield of the same bin.
    pub cov_of_sf: Vec<f64>,
    /// Events outside the binning range.
    pub overflow: u64,
}

impl BinnedCounts {
    pub fn zeros(binning: &Binning) -> Self {
        let n = binning.len();
        Self {
            binning: binning.clone(),
            n_of: vec![0.0; n],
            n_sf: vec![0.0; n],
            var_of: vec![0.0; n],
            var_sf: vec![0.0; n],
            cov_of_sf: vec![0.0; n],
            overflow: 0,
        }
    }

    /// Counts with Poisson variances.
    pub fn from_counts(binning: &Binning, n_of: Vec<f64>, n_sf: Vec<f64>) -> Result<Self> {
        if n_of.len() != binning.len() || n_sf.len() != binning.len() {
            return Err(Error::BinningMismatch(format!(
                "{} bins but {} OF / {} SF values",
                binning.len(),
                n_of.len(),
                n_sf.len()
            )));
        }
        Ok(Self {
            binning: binning.clone(),
            var_of: n_of.iter().map(|v| v.max(0.0)).collect(),
            var_sf: n_sf.iter().map(|v| v.max(0.0)).collect(),
            cov_of_sf: vec![0.0; n_of.len()],
            n_of,
            n_sf,
            overflow: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.n_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_of.is_empty()
    }

    pub fn class(&self, cls: FlavourClass) -> &[f64] {
        match cls {
            FlavourClass::Of => &self.n_of,
            FlavourClass::Sf => &self.n_sf,
        }
    }

    pub fn total(&self) -> Vec<f64> {
        self.n_of.iter().zip(&self.n_sf).map(|(o, s)| o + s).collect()
    }

    /// Bins with a negative yield in either class (possible after subtraction).
    pub fn negative_bins(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.n_of[i] < 0.0 || self.n_sf[i] < 0.0).collect()
    }

    pub fn scaled(&self, k: f64) -> Self {
        let sc = |v: &[f64], f: f64| v.iter().map(|x| x * f).collect::<Vec<_>>();
        Self {
            binning: self.binning.clone(),
            n_of: sc(&self.n_of, k),
            n_sf: sc(&self.n_sf, k),
            var_of: sc(&self.var_of, k * k),
            var_sf: sc(&self.var_sf, k * k),
            cov_of_sf: sc(&self.cov_of_sf, k * k),
            overflow: self.overflow,
        }
    }
}

/// Histograms events by `dt` and class, true or reconstructed.
pub fn bin_events<'a, I>(events: I, binning: &Binning, which: WhichDt) -> BinnedCounts
where
    I: IntoIterator<Item = &'a EventRecord>,
{
    let mut c = BinnedCounts::zeros(binning);
    for e in events {
        match binning.find(e.dt(which)) {
            Some(i) => match e.class(which) {
                FlavourClass::Of => c.n_of[i] += 1.0,
                FlavourClass::Sf => c.n_sf[i] += 1.0,
            },
            None => c.overflow += 1,
        }
    }
    c.var_of = c.n_of.clone();
    c.var_sf = c.n_sf.clone();
    c
}

/// Expected background of one category, binned, with its yield uncertainties.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryBackground {
    pub category: Category,
    pub expected: BinnedCounts,
    pub yield_err_of: f64,
    pub yield_err_sf: f64,
}

impl CategoryBackground {
    fn total(&self, cls: FlavourClass) -> f64 {
        self.expected.class(cls).iter().sum()
    }
}

/// Bins the configured background shapes and yields.
pub fn background_templates(cfg: &BackgroundConfig, binning: &Binning, p: &ModelParams) -> Result<Vec<CategoryBackground>> {
    cfg.validate()?;
    cfg.sources()
        .map(|(category, src)| {
            let mut expected = BinnedCounts::zeros(binning);
            for (i, (lo, hi)) in binning.iter().enumerate() {
                expected.n_of[i] = src.n_of * src.shape.bin_fraction(lo, hi, FlavourClass::Of, p)?;
                expected.n_sf[i] = src.n_sf * src.shape.bin_fraction(lo, hi, FlavourClass::Sf, p)?;
            }
            Ok(CategoryBackground {
                category,
                expected,
                yield_err_of: src.err_of,
                yield_err_sf: src.err_sf,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subtraction {
    pub counts: BinnedCounts,
    /// Per-bin asymmetry systematic from the background yield uncertainties.
    pub systematic: Vec<f64>,
    /// Bins left negative by the subtraction; values are kept as-is.
    pub negative_bins: Vec<usize>,
}

fn subtract_scaled(c: &BinnedCounts, bkg: &[CategoryBackground], scale: impl Fn(usize, FlavourClass) -> f64) -> BinnedCounts {
    let mut out = c.clone();
    for (k, b) in bkg.iter().enumerate() {
        for i in 0..c.len() {
            out.n_of[i] -= scale(k, FlavourClass::Of) * b.expected.n_of[i];
            out.n_sf[i] -= scale(k, FlavourClass::Sf) * b.expected.n_sf[i];
        }
    }
    out
}

fn point_asymmetry(o: f64, s: f64) -> Option<f64> {
    let t = o + s;
    (t > 0.0).then(|| (o - s) / t)
}

/// Removes expected background bin by bin.
///
/// The systematic is the quadrature sum, over categories and classes, of the
/// asymmetry shift when that yield moves by its uncertainty.
pub fn subtract_background(c: &BinnedCounts, bkg: &[CategoryBackground]) -> Result<Subtraction> {
    for b in bkg {
        c.binning.ensure_same(&b.expected.binning)?;
    }
    let nominal = subtract_scaled(c, bkg, |_, _| 1.0);
    let mut syst2 = vec![0.0; c.len()];
    for (k, b) in bkg.iter().enumerate() {
        for cls in [FlavourClass::Of, FlavourClass::Sf] {
            let total = b.total(cls);
            let err = match cls {
                FlavourClass::Of => b.yield_err_of,
                FlavourClass::Sf => b.yield_err_sf,
            };
            if total <= 0.0 || err <= 0.0 {
                continue;
            }
            let rel = err / total;
            let shifted: Vec<BinnedCounts> = [1.0 + rel, 1.0 - rel]
                .into_iter()
                .map(|f| subtract_scaled(c, bkg, |kk, cc| if kk == k && cc == cls { f } else { 1.0 }))
                .collect();
            for (i, s2) in syst2.iter_mut().enumerate() {
                let Some(a0) = point_asymmetry(nominal.n_of[i], nominal.n_sf[i]) else {
                    continue;
                };
                let d = shifted
                    .iter()
                    .filter_map(|v| point_asymmetry(v.n_of[i], v.n_sf[i]))
                    .map(|a| (a - a0).abs())
                    .fold(0.0, f64::max);
                *s2 += d * d;
            }
        }
    }
    let negative_bins = nominal.negative_bins();
    Ok(Subtraction {
        counts: nominal,
        systematic: syst2.into_iter().map(f64::sqrt).collect(),
        negative_bins,
    })
}

/// Undoes a symmetric flavour-flip probability `w` on the counts.
pub fn correct_mistag_counts(c: &BinnedCounts, w: f64) -> Result<BinnedCounts> {
    check_mistag(w)?;
    let d = 1.0 - 2.0 * w;
    let (al, be) = ((1.0 - w) / d, -w / d);
    let mut out = c.clone();
    for i in 0..c.len() {
        let (o, s) = (c.n_of[i], c.n_sf[i]);
        let (vo, vs, cv) = (c.var_of[i], c.var_sf[i], c.cov_of_sf[i]);
        out.n_of[i] = al * o + be * s;
        out.n_sf[i] = be * o + al * s;
        out.var_of[i] = al * al * vo + be * be * vs + 2.0 * al * be * cv;
        out.var_sf[i] = be * be * vo + al * al * vs + 2.0 * al * be * cv;
        out.cov_of_sf[i] = al * be * (vo + vs) + (al * al + be * be) * cv;
    }
    Ok(out)
}

fn check_mistag(w: f64) -> Result<()> {
    if !(0.0..0.5).contains(&w) {
        return Err(Error::invalid(format!("mistag fraction must lie in [0, 0.5), got {w}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetrySpectrum {
    pub binning: Binning,
    pub a: Vec<f64>,
    pub stat_err: Vec<f64>,
    pub syst_err: Vec<f64>,
    /// Named systematic sources in column order.
    pub syst_breakdown: Vec<(String, Vec<f64>)>,
    /// Externally quoted total errors (rounded independently of stat and syst).
    pub quoted_total: Option<Vec<f64>>,
    /// Bins whose binomial error vanished and was replaced by a bootstrap estimate.
    pub degenerate: Vec<bool>,
    /// Full statistical covariance of `a`, when known.
    pub stat_cov: Option<DMatrix<f64>>,
}

impl AsymmetrySpectrum {
    pub fn new(binning: Binning, a: Vec<f64>, stat_err: Vec<f64>) -> Result<Self> {
        if a.len() != binning.len() || stat_err.len() != binning.len() {
            return Err(Error::BinningMismatch(format!(
                "{} bins but {} values / {} errors",
                binning.len(),
                a.len(),
                stat_err.len()
            )));
        }
        let n = a.len();
        Ok(Self {
            binning,
            a,
            stat_err,
            syst_err: vec![0.0; n],
            syst_breakdown: Vec::new(),
            quoted_total: None,
            degenerate: vec![false; n],
            stat_cov: None,
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Quoted totals if present, else `sqrt(stat^2 + syst^2)`.
    pub fn total_err(&self) -> Vec<f64> {
        match &self.quoted_total {
            Some(q) => q.clone(),
            None => self.stat_err.iter().zip(&self.syst_err).map(|(s, y)| s.hypot(*y)).collect(),
        }
    }

    pub fn systematic(&self, name: &str) -> Option<&[f64]> {
        self.syst_breakdown.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Adds (or replaces) a systematic source and recomputes the quadrature total.
    pub fn set_systematic(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::BinningMismatch(format!(
                "systematic {name} has {} values for {} bins",
                values.len(),
                self.len()
            )));
        }
        match self.syst_breakdown.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = values,
            None => self.syst_breakdown.push((name.to_string(), values)),
        }
        self.syst_err = (0..self.len())
            .map(|i| {
                self.syst_breakdown
                    .iter()
                    .map(|(_, v)| v[i] * v[i])
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.quoted_total = None;
        Ok(())
    }
}

/// Std. deviation of the asymmetry under binomial resampling with a
/// Jeffreys-smoothed OF fraction, for bins where one class is empty.
fn bootstrap_error(n_of: f64, n_sf: f64, bin: usize) -> f64 {
    let n = (n_of + n_sf).round().max(1.0) as u64;
    let p = (n_of.max(0.0) + 0.5) / (n_of.max(0.0) + n_sf.max(0.0) + 1.0);
    let dist = Binomial::new(n, p.clamp(0.0, 1.0)).expect("valid binomial");
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    rng.set_stream(bin as u64);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let k = dist.sample(&mut rng) as f64;
        let a = (2.0 * k - n as f64) / n as f64;
        sum += a;
        sum2 += a * a;
    }
    let m = BOOTSTRAP_RESAMPLES as f64;
    ((sum2 - sum * sum / m) / (m - 1.0)).max(0.0).sqrt()
}

/// Per-bin `(n_of - n_sf) / (n_of + n_sf)` with propagated statistical errors.
pub fn asymmetry(c: &BinnedCounts) -> Result<AsymmetrySpectrum> {
    let n = c.len();
    let mut a = Vec::with_capacity(n);
    let mut err = Vec::with_capacity(n);
    let mut degenerate = vec![false; n];
    for i in 0..n {
        let (o, s) = (c.n_of[i], c.n_sf[i]);
        let t = o + s;
        if !(t > 0.0) {
            return Err(Error::EmptyBin { bin: i });
        }
        let (d_o, d_s) = (2.0 * s / (t * t), -2.0 * o / (t * t));
        let var = d_o * d_o * c.var_of[i] + d_s * d_s * c.var_sf[i] + 2.0 * d_o * d_s * c.cov_of_sf[i];
        a.push((o - s) / t);
        if var > 0.0 {
            err.push(var.sqrt());
        } else {
            degenerate[i] = true;
            err.push(bootstrap_error(o, s, i));
        }
    }
    let mut spec = AsymmetrySpectrum::new(c.binning.clone(), a, err)?;
    spec.degenerate = degenerate;
    Ok(spec)
}

/// Divides out the dilution `1 - 2w` and records the mistag systematic.
///
/// Values may exceed 1 after correction; nothing is clamped.
pub fn correct_mistag(a_obs: &AsymmetrySpectrum, w: f64, w_err: f64) -> Result<AsymmetrySpectrum> {
    check_mistag(w)?;
    if !(w_err >= 0.0) || w + w_err >= 0.5 {
        return Err(Error::invalid(format!("mistag uncertainty {w_err} invalid for w = {w}")));
    }
    let k = 1.0 / (1.0 - 2.0 * w);
    let k_up = 1.0 / (1.0 - 2.0 * (w + w_err));
    let k_down = 1.0 / (1.0 - 2.0 * (w - w_err).max(0.0));
    let mut out = a_obs.clone();
    out.a = a_obs.a.iter().map(|v| v * k).collect();
    out.stat_err = a_obs.stat_err.iter().map(|v| v * k).collect();
    out.stat_cov = a_obs.stat_cov.as_ref().map(|m| m * (k * k));
    out.syst_breakdown = a_obs
        .syst_breakdown
        .iter()
        .map(|(n, v)| (n.clone(), v.iter().map(|x| x * k).collect()))
        .collect();
    let mistag: Vec<f64> = a_obs
        .a
        .iter()
        .map(|v| (v * k_up - v * k).abs().max((v * k_down - v * k).abs()))
        .collect();
    out.set_systematic(SOURCE_MISTAG, mistag)?;
    Ok(out)
}

const SPECTRUM_FIXED_COLUMNS: [&str; 7] = ["bin", "lo_ps", "hi_ps", "a", "total", "stat", "syst_total"];

/// Writes a spectrum in the Table-I column layout.
pub fn write_spectrum<W: Write>(out: W, s: &AsymmetrySpectrum) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut header: Vec<String> = SPECTRUM_FIXED_COLUMNS.iter().map(|c| c.to_string()).collect();
    header.extend(s.syst_breakdown.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    let total = s.total_err();
    for (i, (lo, hi)) in s.binning.iter().enumerate() {
        let mut row = vec![
            (i + 1).to_string(),
            lo.to_string(),
            hi.to_string(),
            s.a[i].to_string(),
            total[i].to_string(),
            s.stat_err[i].to_string(),
            s.syst_err[i].to_string(),
        ];
        row.extend(s.syst_breakdown.iter().map(|(_, v)| v[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(field: &str, row: usize, column: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::parse(format!("row {row}, column {column}"), format!("{field:?}: {e}")))
}

/// Reads a spectrum file; the `total` column is kept as the quoted total.
pub fn read_spectrum<R: Read>(input: R) -> Result<AsymmetrySpectrum> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < SPECTRUM_FIXED_COLUMNS.len() || header[..7] != SPECTRUM_FIXED_COLUMNS {
        return Err(Error::parse(
            "spectrum header",
            format!("expected leading columns {SPECTRUM_FIXED_COLUMNS:?}, got {header:?}"),
        ));
    }
    let sources = &header[7..];
    let mut edges = Vec::new();
    let (mut a, mut total, mut stat, mut syst) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut breakdown: Vec<Vec<f64>> = vec![Vec::new(); sources.len()];
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        if rec.len() != header.len() {
            return Err(Error::parse(format!("row {row}"), format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let v: Vec<f64> = rec
            .iter()
            .zip(&header)
            .skip(1)
            .map(|(f, c)| parse_f64(f, row, c))
            .collect::<Result<_>>()?;
        let (lo, hi) = (v[0], v[1]);
        match edges.last() {
            None => edges.extend([lo, hi]),
            Some(&prev) if prev == lo => edges.push(hi),
            Some(&prev) => {
                return Err(Error::parse(format!("row {row}"), format!("window starts at {lo} but previous ended at {prev}")));
            }
        }
        a.push(v[2]);
        total.push(v[3]);
        stat.push(v[4]);
        syst.push(v[5]);
        for (j, b) in breakdown.iter_mut().enumerate() {
            b.push(v[6 + j]);
        }
    }
    let binning = Binning::new(edges)?;
    let mut s = AsymmetrySpectrum::new(binning, a, stat)?;
    s.syst_err = syst;
    s.syst_breakdown = sources.iter().cloned().zip(breakdown).collect();
    s.quoted_total = Some(total);
    Ok(s)
}

const TABLE1_CSV: &str = include_str!("../fixtures/table1_asymmetry.csv");

/// The published deconvolved asymmetry spectrum.
pub fn table1() -> AsymmetrySpectrum {
    read_spectrum(TABLE1_CSV.as_bytes()).expect("shipped fixture parses")
}

const COUNTS_COLUMNS: [&str; 8] = ["bin", "lo_ps", "hi_ps", "n_of", "n_sf", "var_of", "var_sf", "cov_of_sf"];

pub fn write_counts<W: Write>(out: W, c: &BinnedCounts) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COUNTS_COLUMNS)?;
    for (i, (lo, hi)) in c.binning.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            lo.to_string(),
            hi.to_string(),
            c.n_of[i].to_string(),
            c.n_sf[i].to_string(),
            c.var_of[i].to_string(),
            c.var_sf[i].to_string(),
            c.cov_of_sf[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_counts<R: Read>(input: R) -> Result<BinnedCounts> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COUNTS_COLUMNS {
        return Err(Error::parse("counts header", format!("expected {COUNTS_COLUMNS:?}, got {header:?}")));
    }
    let mut edges: Vec<f64> = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 5];
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .zip(&header)
            .skip(1)
            .map(|(f, c)| parse_f64(f, k + 1, c))
            .collect::<Result<_>>()?;
        if edges.is_empty() {
            edges.push(v[0]);
        }
        edges.push(v[1]);
        for (j, col) in cols.iter_mut().enumerate() {
            col.push(v[2 + j]);
        }
    }
    let binning = Binning::new(edges)?;
    let mut it = cols.into_iter();
    let mut next = || it.next().expect("five columns");
    Ok(BinnedCounts {
        binning,
        n_of: next(),
        n_sf: next(),
        var_of: next(),
        var_sf: next(),
        cov_of_sf: next(),
        overflow: 0,
    })
}
