//! Seeded toy generation of B-pair decays with a parameterized detector.
//!
//! Decay times are drawn from `exp(-(t1 + t2) / tau) / tau^2`; the true flavour
//! class then follows from the model's asymmetry at those times, with
//! `P(OF) = (1 + A) / 2`. Summing over classes recovers the pair density
//! exactly, so no events are rejected unless a model leaves [-1, 1].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FlavourClass, Model, ModelParams};
use crate::quad::{self, QuadOptions};
use crate::rng::stream_rng;

/// Lorentz boost of the Upsilon(4S) along z.
pub const BETA_GAMMA: f64 = 0.425;
/// Speed of light in um/ps.
pub const C_UM_PER_PS: f64 = 299.792458;
/// Upper edge of the analysed `dt` range; background shapes normalize over `[0, DT_RANGE]`.
pub const DT_RANGE: f64 = 20.0;

/// Stream indices for background generation start here, clear of signal streams.
const BACKGROUND_STREAM_BASE: u64 = 1 << 40;

pub fn boost_um_per_ps() -> f64 {
    BETA_GAMMA * C_UM_PER_PS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Signal,
    DstarFake,
    WrongCombination,
    DssCharged,
}

impl Category {
    pub const BACKGROUNDS: [Category; 3] = [Category::DstarFake, Category::WrongCombination, Category::DssCharged];

    pub fn name(self) -> &'static str {
        match self {
            Category::Signal => "signal",
            Category::DstarFake => "dstar_fake",
            Category::WrongCombination => "wrong_combination",
            Category::DssCharged => "dss_charged",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Category::Signal, Category::DstarFake, Category::WrongCombination, Category::DssCharged]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::parse("category", format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    #[serde(rename = "t1_ps")]
    pub t1: f64,
    #[serde(rename = "t2_ps")]
    pub t2: f64,
    #[serde(rename = "dt_true_ps")]
    pub dt_true: f64,
    pub cls_true: FlavourClass,
    #[serde(rename = "dz_rec_um")]
    pub dz_rec: f64,
    #[serde(rename = "dt_rec_ps")]
    pub dt_rec: f64,
    pub cls_assigned: FlavourClass,
    pub category: Category,
    pub stream: u64,
    pub index: u64,
}

impl EventRecord {
    /// Truth-level signal event with an ideal detector.
    pub fn from_pair(t1: f64, t2: f64, cls: FlavourClass) -> Self {
        let dt = (t1 - t2).abs();
        Self {
            t1,
            t2,
            dt_true: dt,
            cls_true: cls,
            dz_rec: boost_um_per_ps() * dt,
            dt_rec: dt,
            cls_assigned: cls,
            category: Category::Signal,
            stream: 0,
            index: 0,
        }
    }

    pub fn dt(&self, which: WhichDt) -> f64 {
        match which {
            WhichDt::True => self.dt_true,
            WhichDt::Reconstructed => self.dt_rec,
        }
    }

    pub fn class(&self, which: WhichDt) -> FlavourClass {
        match which {
            WhichDt::True => self.cls_true,
            WhichDt::Reconstructed => self.cls_assigned,
        }
    }
}

/// Selects truth-level or reconstructed quantities of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhichDt {
    True,
    Reconstructed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Baseline dz resolution in um.
    pub resolution_sigma: f64,
    /// Additional Gaussian smearing in um.
    pub extra_smear_sigma: f64,
    pub mistag_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            resolution_sigma: 100.0,
            extra_smear_sigma: 46.0,
            mistag_fraction: 0.015,
        }
    }
}

impl DetectorConfig {
    pub fn ideal() -> Self {
        Self {
            resolution_sigma: 0.0,
            extra_smear_sigma: 0.0,
            mistag_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("resolution_sigma", self.resolution_sigma),
            ("extra_smear_sigma", self.extra_smear_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("detector {name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..0.5).contains(&self.mistag_fraction) {
            return Err(Error::invalid(format!(
                "mistag_fraction must lie in [0, 0.5), got {}",
                self.mistag_fraction
            )));
        }
        Ok(())
    }

    /// Total dz smearing width in um.
    pub fn dz_sigma(&self) -> f64 {
        self.resolution_sigma.hypot(self.extra_smear_sigma)
    }

    /// Total smearing expressed in ps of `dt`.
    pub fn dt_sigma(&self) -> f64 {
        self.dz_sigma() / boost_um_per_ps()
    }
}

/// Background `dt` shape on `[0, DT_RANGE]`, with separate OF and SF densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DtShape {
    /// `exp(-dt / tau)` for both classes; `tau` defaults to the signal lifetime.
    Exponential {
        #[serde(default)]
        tau: Option<f64>,
    },
    Flat,
    /// `exp(-dt / tau) (1 +- cos(dm dt))` for OF (SF).
    Oscillating {
        #[serde(default)]
        tau: Option<f64>,
        #[serde(default)]
        dm: Option<f64>,
    },
}

impl Default for DtShape {
    fn default() -> Self {
        DtShape::Exponential { tau: None }
    }
}

impl DtShape {
    fn validate(&self) -> Result<()> {
        let check = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => {
                Err(Error::invalid(format!("background shape {name} must be > 0, got {x}")))
            }
            _ => Ok(()),
        };
        match *self {
            DtShape::Exponential { tau } => check("tau", tau),
            DtShape::Flat => Ok(()),
            DtShape::Oscillating { tau, dm } => {
                check("tau", tau)?;
                check("dm", dm)
            }
        }
    }

    fn density_unnormalized(&self, dt: f64, cls: FlavourClass, p: &ModelParams) -> f64 {
        match *self {
            DtShape::Exponential { tau } => (-dt / tau.unwrap_or(p.tau)).exp(),
            DtShape::Flat => 1.0,
            DtShape::Oscillating { tau, dm } => {
                let c = (dm.unwrap_or(p.dm) * dt).cos();
                let osc = match cls {
                    FlavourClass::Of => 1.0 + c,
                    FlavourClass::Sf => 1.0 - c,
                };
                (-dt / tau.unwrap_or(p.tau)).exp() * osc
            }
        }
    }

    fn integral(&self, lo: f64, hi: f64, cls: FlavourClass, p: &ModelParams) -> Result<f64> {
        match *self {
            DtShape::Exponential { tau } => {
                let t = tau.unwrap_or(p.tau);
                Ok(t * ((-lo / t).exp() - (-hi / t).exp()))
            }
            DtShape::Flat => Ok(hi - lo),
            DtShape::Oscillating { .. } => Ok(quad::integrate(
                |x| self.density_unnormalized(x, cls, p),
                lo,
                hi,
                &[],
                QuadOptions::abs(1e-13),
            )?
            .value),
        }
    }

    /// Fraction of the class's events falling in `[lo, hi)`, clipped to the shape range.
    pub fn bin_fraction(&self, lo: f64, hi: f64, cls: FlavourClass, p: &ModelParams) -> Result<f64> {
        let (lo, hi) = (lo.max(0.0), hi.min(DT_RANGE));
        if hi <= lo {
            return Ok(0.0);
        }
        Ok(self.integral(lo, hi, cls, p)? / self.integral(0.0, DT_RANGE, cls, p)?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, cls: FlavourClass, p: &ModelParams, rng: &mut R) -> f64 {
        match *self {
            DtShape::Exponential { tau } => {
                let t = tau.unwrap_or(p.tau);
                let cut = 1.0 - (-DT_RANGE / t).exp();
                let u: f64 = rng.random();
                -t * (1.0 - u * cut).ln()
            }
            DtShape::Flat => rng.random::<f64>() * DT_RANGE,
            DtShape::Oscillating { tau, .. } => {
                // envelope 2 exp(-dt / tau), drawn from the truncated exponential
                let t = tau.unwrap_or(p.tau);
                let env = DtShape::Exponential { tau: Some(t) };
                loop {
                    let x = env.sample(cls, p, rng);
                    let accept = self.density_unnormalized(x, cls, p) / (2.0 * (-x / t).exp());
                    if rng.random::<f64>() < accept {
                        return x;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSource {
    pub n_of: f64,
    pub n_sf: f64,
    /// Yield uncertainties used for the subtraction systematic.
    #[serde(default)]
    pub err_of: f64,
    #[serde(default)]
    pub err_sf: f64,
    #[serde(default)]
    pub shape: DtShape,
}

impl BackgroundSource {
    pub fn yield_of(&self, cls: FlavourClass) -> f64 {
        match cls {
            FlavourClass::Of => self.n_of,
            FlavourClass::Sf => self.n_sf,
        }
    }

    pub fn yield_err(&self, cls: FlavourClass) -> f64 {
        match cls {
            FlavourClass::Of => self.err_of,
            FlavourClass::Sf => self.err_sf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundConfig {
    /// Poisson-fluctuate the yields (otherwise inject rounded expectations).
    #[serde(default = "default_true")]
    pub fluctuate: bool,
    #[serde(default)]
    pub dstar_fake: Option<BackgroundSource>,
    #[serde(default)]
    pub wrong_combination: Option<BackgroundSource>,
    #[serde(default)]
    pub dss_charged: Option<BackgroundSource>,
}

fn default_true() -> bool {
    true
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl BackgroundConfig {
    pub fn none() -> Self {
        Self {
            fluctuate: true,
            dstar_fake: None,
            wrong_combination: None,
            dss_charged: None,
        }
    }

    /// Yields and errors at the scale of the published selection.
    pub fn nominal() -> Self {
        let dss_rel = 16.0 / 255.5;
        Self {
            fluctuate: true,
            dstar_fake: Some(BackgroundSource {
                n_of: 126.0,
                n_sf: 54.0,
                err_of: 6.0,
                err_sf: 4.0,
                shape: DtShape::default(),
            }),
            wrong_combination: Some(BackgroundSource {
                n_of: 78.0,
                n_sf: 237.0,
                err_of: 9.0,
                err_sf: 15.0,
                shape: DtShape::default(),
            }),
            dss_charged: Some(BackgroundSource {
                n_of: 254.0,
                n_sf: 1.5,
                err_of: 254.0 * dss_rel,
                err_sf: 1.5 * dss_rel,
                shape: DtShape::default(),
            }),
        }
    }

    pub fn sources(&self) -> impl Iterator<Item = (Category, &BackgroundSource)> {
        [
            (Category::DstarFake, self.dstar_fake.as_ref()),
            (Category::WrongCombination, self.wrong_combination.as_ref()),
            (Category::DssCharged, self.dss_charged.as_ref()),
        ]
        .into_iter()
        .filter_map(|(c, s)| s.map(|s| (c, s)))
    }

    pub fn validate(&self) -> Result<()> {
        for (cat, s) in self.sources() {
            for (name, v) in [("n_of", s.n_of), ("n_sf", s.n_sf), ("err_of", s.err_of), ("err_sf", s.err_sf)] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("background {cat}.{name} must be >= 0, got {v}")));
                }
            }
            s.shape.validate()?;
        }
        Ok(())
    }

    pub fn total(&self, cls: FlavourClass) -> f64 {
        self.sources().map(|(_, s)| s.yield_of(cls)).sum()
    }
}

/// Draws one pair `(t1, t2, cls_true)` under `model`.
pub fn sample_pair<R: Rng + ?Sized>(model: Model, p: &ModelParams, rng: &mut R) -> Result<(f64, f64, FlavourClass)> {
    let effective = match model {
        Model::Decohered => {
            if rng.random::<f64>() < p.zeta {
                Model::Sd
            } else {
                Model::Qm
            }
        }
        other => other,
    };
    sample_pair_with(|t1, t2| effective.pair_asymmetry(t1, t2, p), p.tau, rng)
}

/// Draws decay times from the pair density and a class from an arbitrary joint asymmetry.
pub fn sample_pair_with<F, R>(asymmetry: F, tau: f64, rng: &mut R) -> Result<(f64, f64, FlavourClass)>
where
    F: Fn(f64, f64) -> f64,
    R: Rng + ?Sized,
{
    let life = Exp::new(1.0 / tau).map_err(|e| Error::invalid(format!("lifetime: {e}")))?;
    let t1 = life.sample(rng);
    let t2 = life.sample(rng);
    let a = asymmetry(t1, t2);
    if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&a) {
        return Err(Error::Envelope { value: a, t1, t2 });
    }
    let cls = if rng.random::<f64>() < 0.5 * (1.0 + a) {
        FlavourClass::Of
    } else {
        FlavourClass::Sf
    };
    Ok((t1, t2, cls))
}

/// Applies dz smearing and flavour mistagging to a truth-level event.
pub fn apply_detector<R: Rng + ?Sized>(e: &EventRecord, d: &DetectorConfig, rng: &mut R) -> EventRecord {
    let boost = boost_um_per_ps();
    let sigma = d.dz_sigma();
    let noise = if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    };
    let dz_rec = boost * e.dt_true + noise;
    let flip = d.mistag_fraction > 0.0 && rng.random::<f64>() < d.mistag_fraction;
    EventRecord {
        dz_rec,
        dt_rec: dz_rec.abs() / boost,
        cls_assigned: if flip { e.cls_true.flipped() } else { e.cls_true },
        ..*e
    }
}

/// Appends background events of every configured category.
///
/// Background events are produced directly at reconstructed level: `dt_rec` is
/// drawn from the category shape, `t1 = dt`, `t2 = 0`, and the assigned class
/// equals the true class.
pub fn inject_backgrounds<R: Rng + ?Sized>(
    mut events: Vec<EventRecord>,
    b: &BackgroundConfig,
    p: &ModelParams,
    rng: &mut R,
) -> Result<Vec<EventRecord>> {
    b.validate()?;
    for (ci, (cat, src)) in b.sources().enumerate() {
        let stream = BACKGROUND_STREAM_BASE + ci as u64;
        let mut index = 0u64;
        for cls in [FlavourClass::Of, FlavourClass::Sf] {
            let mean = src.yield_of(cls);
            let n = if b.fluctuate {
                if mean > 0.0 {
                    Poisson::new(mean)
                        .map_err(|e| Error::invalid(format!("poisson mean {mean}: {e}")))?
                        .sample(rng) as u64
                } else {
                    0
                }
            } else {
                mean.round() as u64
            };
            for _ in 0..n {
                let dt = src.shape.sample(cls, p, rng);
                events.push(EventRecord {
                    t1: dt,
                    t2: 0.0,
                    dt_true: dt,
                    cls_true: cls,
                    dz_rec: boost_um_per_ps() * dt,
                    dt_rec: dt,
                    cls_assigned: cls,
                    category: cat,
                    stream,
                    index,
                });
                index += 1;
            }
        }
    }
    Ok(events)
}

/// Everything needed to produce one event sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSpec {
    pub model: Model,
    pub params: ModelParams,
    pub detector: DetectorConfig,
    pub backgrounds: BackgroundConfig,
    pub n_signal: u64,
    pub seed: u64,
    pub events_per_stream: u64,
}

pub const DEFAULT_EVENTS_PER_STREAM: u64 = 1 << 16;

/// Generates `n` signal events on one stream, detector applied.
pub fn generate_stream(
    model: Model,
    p: &ModelParams,
    d: &DetectorConfig,
    n: u64,
    stream: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EventRecord>> {
    let mut out = Vec::with_capacity(n as usize);
    for index in 0..n {
        let (t1, t2, cls) = sample_pair(model, p, rng)?;
        let mut e = apply_detector(&EventRecord::from_pair(t1, t2, cls), d, rng);
        e.stream = stream;
        e.index = index;
        out.push(e);
    }
    Ok(out)
}

/// Generates signal events across independent streams in parallel, then backgrounds.
///
/// Output order is canonical: signal by (stream, index), then background
/// categories in declaration order.
pub fn generate_events(spec: &GenerationSpec) -> Result<Vec<EventRecord>> {
    spec.params.validate()?;
    spec.detector.validate()?;
    spec.backgrounds.validate()?;
    if spec.events_per_stream == 0 {
        return Err(Error::invalid("events_per_stream must be > 0"));
    }
    let per = spec.events_per_stream;
    let n_streams = spec.n_signal.div_ceil(per);
    let chunks: Vec<Vec<EventRecord>> = (0..n_streams)
        .into_par_iter()
        .map(|s| {
            let n = per.min(spec.n_signal - s * per);
            let mut rng = stream_rng(spec.seed, s);
            generate_stream(spec.model, &spec.params, &spec.detector, n, s, &mut rng)
        })
        .collect::<Result<_>>()?;
    let events: Vec<EventRecord> = chunks.into_iter().flatten().collect();
    let mut bkg_rng = stream_rng(spec.seed, BACKGROUND_STREAM_BASE);
    inject_backgrounds(events, &spec.backgrounds, &spec.params, &mut bkg_rng)
}

pub const EVENT_HEADER: [&str; 10] = [
    "t1_ps",
    "t2_ps",
    "dt_true_ps",
    "cls_true",
    "dz_rec_um",
    "dt_rec_ps",
    "cls_assigned",
    "category",
    "stream",
    "index",
];

pub fn write_events<W: Write>(out: W, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(EVENT_HEADER)?;
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an event file; malformed rows are reported with their row number.
pub fn read_events<R: Read>(input: R) -> Result<Vec<EventRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(EVENT_HEADER.iter().copied()) {
        return Err(Error::parse(
            "event file header",
            format!("expected {:?}, got {:?}", EVENT_HEADER, header.iter().collect::<Vec<_>>()),
        ));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(format!("event row {}", i + 1), e.to_string())))
        .collect()
}
