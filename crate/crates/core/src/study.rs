//! Paper-scale pseudo-experiments: generate, bin, subtract, un-mistag, unfold,
//! correct, and fit, plus the ensembles that calibrate the unfolding.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, background_templates, bin_events, correct_mistag_counts, subtract_background, AsymmetrySpectrum,
    BinnedCounts, Binning, CategoryBackground, SOURCE_BACKGROUND, SOURCE_DECONVOLUTION, SOURCE_EVENT_SELECTION,
    SOURCE_MISTAG, TABLE1_EVENT_SELECTION,
};
use crate::error::{Error, Result};
use crate::fitkit::{self, BinRule, FitConfig, FitModel};
use crate::models::{FlavourClass, Model, ModelParams};
use crate::rng::{derive_seed, stream_rng};
use crate::toygen::{
    boost_um_per_ps, generate_events, sample_pair, BackgroundConfig, DetectorConfig, EventRecord, GenerationSpec,
    WhichDt,
};
use crate::unfold::{bias_correct, build_response, dsvd_unfold, BiasCorrection, ModelEnsemble, ResponsePair, UnfoldConfig, Unfolded};

const TAG_RESPONSE: u64 = 1;
const TAG_SMEAR: u64 = 2;
const TAG_CALIBRATION: u64 = 3;
const TAG_VALIDATION: u64 = 4;

/// Models whose ensembles define the bias correction.
pub const CALIBRATION_MODELS: [Model; 3] = [Model::Qm, Model::Sd, Model::PsBoundaryMax];

/// How the extra smearing term is varied for the deconvolution systematic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmearVariation {
    /// `extra +- delta`.
    #[default]
    Linear,
    /// `sqrt(extra^2 +- delta^2)`.
    Quadrature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub params: ModelParams,
    pub detector: DetectorConfig,
    pub backgrounds: BackgroundConfig,
    pub binning: Binning,
    pub unfold: UnfoldConfig,
    /// Signal events per pseudo-experiment.
    pub n_signal: u64,
    /// QM Monte Carlo events used for the response and the a-priori spectrum.
    pub mc_events: u64,
    pub mistag_err: f64,
    pub smear_delta_um: f64,
    pub smear_variation: SmearVariation,
    /// Per-bin event-selection systematic; defaults to the published column for the default binning.
    pub event_selection: Option<Vec<f64>>,
    pub replicas: usize,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            params: ModelParams::default(),
            detector: DetectorConfig::default(),
            backgrounds: BackgroundConfig::nominal(),
            binning: Binning::default(),
            unfold: UnfoldConfig::default(),
            n_signal: 7815,
            mc_events: 500_000,
            mistag_err: 0.005,
            smear_delta_um: 35.0,
            smear_variation: SmearVariation::Linear,
            event_selection: None,
            replicas: 300,
            seed: 1,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.detector.validate()?;
        self.backgrounds.validate()?;
        self.binning.validate()?;
        self.unfold.validate(self.binning.len())?;
        if self.n_signal == 0 || self.mc_events == 0 {
            return Err(Error::invalid("n_signal and mc_events must be > 0"));
        }
        if !(self.mistag_err >= 0.0) || self.detector.mistag_fraction + self.mistag_err >= 0.5 {
            return Err(Error::invalid(format!("mistag uncertainty {} invalid", self.mistag_err)));
        }
        if !(self.smear_delta_um >= 0.0) {
            return Err(Error::invalid("smear delta must be >= 0"));
        }
        if self.smear_variation == SmearVariation::Quadrature && self.smear_delta_um > self.detector.extra_smear_sigma {
            return Err(Error::invalid("quadrature smear variation needs delta <= extra smearing"));
        }
        if let Some(v) = &self.event_selection {
            if v.len() != self.binning.len() {
                return Err(Error::BinningMismatch(format!("{} event-selection values for {} bins", v.len(), self.binning.len())));
            }
        }
        Ok(())
    }

    fn event_selection(&self) -> Vec<f64> {
        match &self.event_selection {
            Some(v) => v.clone(),
            None if self.binning.edges() == analysis::DEFAULT_EDGES => TABLE1_EVENT_SELECTION.to_vec(),
            None => vec![0.0; self.binning.len()],
        }
    }

    fn generation(&self, model: Model, seed: u64) -> GenerationSpec {
        GenerationSpec {
            model,
            params: self.params,
            detector: self.detector,
            backgrounds: self.backgrounds.clone(),
            n_signal: self.n_signal,
            seed,
            events_per_stream: self.n_signal,
        }
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            tau: self.params.tau,
            ..FitConfig::default()
        }
    }
}

/// Expected truth-level asymmetry per bin for a generating model.
pub fn model_truth(model: Model, p: &ModelParams, binning: &Binning) -> Result<Vec<f64>> {
    let bins: Vec<(f64, f64)> = binning.iter().collect();
    bins.par_iter()
        .map(|&(lo, hi)| fitkit::bin_average(|t| model.marginal_asymmetry(t, p), lo, hi, p.tau, BinRule::RateWeighted))
        .collect()
}

fn model_index(m: Model) -> u64 {
    Model::ALL.iter().position(|&x| x == m).expect("listed") as u64
}

/// QM Monte Carlo with a given extra smearing, from shared random numbers so
/// that variants differ only through the smearing width.
fn smeared_mc(cfg: &StudyConfig, tag: u64, extra_sigma: f64) -> Result<Vec<EventRecord>> {
    let chunk = 1u64 << 16;
    let n_chunks = cfg.mc_events.div_ceil(chunk);
    let d = DetectorConfig {
        extra_smear_sigma: extra_sigma,
        mistag_fraction: 0.0,
        ..cfg.detector
    };
    let sigma = d.dz_sigma();
    let boost = boost_um_per_ps();
    let chunks: Vec<Vec<EventRecord>> = (0..n_chunks)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(derive_seed(cfg.seed, tag, 0), s);
            let n = chunk.min(cfg.mc_events - s * chunk);
            (0..n)
                .map(|_| {
                    let (t1, t2, cls) = sample_pair(Model::Qm, &cfg.params, &mut rng)?;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let mut e = EventRecord::from_pair(t1, t2, cls);
                    e.dz_rec = boost * e.dt_true + sigma * z;
                    e.dt_rec = e.dz_rec.abs() / boost;
                    Ok(e)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// The analysis chain with its fixed inputs (response, background templates).
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: StudyConfig,
    pub response: ResponsePair,
    pub templates: Vec<CategoryBackground>,
}

/// Knobs varied for systematics.
#[derive(Debug, Clone, PartialEq)]
struct Variation {
    mistag: f64,
    /// Template scale per (category index, class).
    bkg_scale: Option<(usize, FlavourClass, f64)>,
}

/// One analysed sample before bias correction.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub unfolded: Unfolded,
    /// Unfolded asymmetry with the full statistical covariance.
    pub spectrum: AsymmetrySpectrum,
    pub syst_background: Vec<f64>,
    pub syst_mistag: Vec<f64>,
    pub negative_bins: Vec<usize>,
}

impl Pipeline {
    pub fn new(cfg: StudyConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = smeared_mc(&cfg, TAG_RESPONSE, cfg.detector.extra_smear_sigma)?;
        let response = build_response(&mc, &cfg.binning);
        let templates = background_templates(&cfg.backgrounds, &cfg.binning, &cfg.params)?;
        Ok(Self { cfg, response, templates })
    }

    /// Reconstructed counts of one pseudo-experiment.
    pub fn pseudo_data(&self, model: Model, seed: u64) -> Result<BinnedCounts> {
        let events = generate_events(&self.cfg.generation(model, seed))?;
        Ok(bin_events(&events, &self.cfg.binning, WhichDt::Reconstructed))
    }

    fn unfold_with(&self, raw: &BinnedCounts, v: &Variation) -> Result<(Unfolded, Vec<usize>)> {
        let templates: Vec<CategoryBackground> = match v.bkg_scale {
            None => self.templates.clone(),
            Some((k, cls, f)) => {
                let mut t = self.templates.clone();
                let e = &mut t[k].expected;
                match cls {
                    FlavourClass::Of => e.n_of.iter_mut().for_each(|x| *x *= f),
                    FlavourClass::Sf => e.n_sf.iter_mut().for_each(|x| *x *= f),
                }
                t
            }
        };
        let sub = subtract_background(raw, &templates)?;
        let clean = correct_mistag_counts(&sub.counts, v.mistag)?;
        Ok((dsvd_unfold(&clean, &self.response, &self.cfg.unfold)?, sub.negative_bins))
    }

    fn asym(&self, raw: &BinnedCounts, v: &Variation) -> Result<Vec<f64>> {
        Ok(self.unfold_with(raw, v)?.0.asymmetry()?.a)
    }

    /// Full chain on raw reconstructed counts, with background and mistag systematics.
    pub fn measure(&self, raw: &BinnedCounts) -> Result<Measurement> {
        let w = self.cfg.detector.mistag_fraction;
        let nominal = Variation { mistag: w, bkg_scale: None };
        let (unfolded, negative_bins) = self.unfold_with(raw, &nominal)?;
        let spectrum = unfolded.asymmetry()?;
        let n = spectrum.len();
        let max_shift = |variants: Vec<Vec<f64>>| -> Vec<f64> {
            (0..n)
                .map(|i| variants.iter().map(|a| (a[i] - spectrum.a[i]).abs()).fold(0.0, f64::max))
                .collect()
        };

        let dw = self.cfg.mistag_err;
        let syst_mistag = max_shift(vec![
            self.asym(raw, &Variation { mistag: w + dw, bkg_scale: None })?,
            self.asym(raw, &Variation { mistag: (w - dw).max(0.0), bkg_scale: None })?,
        ]);

        let mut bkg2 = vec![0.0; n];
        for (k, t) in self.templates.iter().enumerate() {
            for cls in [FlavourClass::Of, FlavourClass::Sf] {
                let (total, err) = match cls {
                    FlavourClass::Of => (t.expected.n_of.iter().sum::<f64>(), t.yield_err_of),
                    FlavourClass::Sf => (t.expected.n_sf.iter().sum::<f64>(), t.yield_err_sf),
                };
                if !(total > 0.0 && err > 0.0) {
                    continue;
                }
                let rel = err / total;
                let shift = max_shift(vec![
                    self.asym(raw, &Variation { mistag: w, bkg_scale: Some((k, cls, 1.0 + rel)) })?,
                    self.asym(raw, &Variation { mistag: w, bkg_scale: Some((k, cls, 1.0 - rel)) })?,
                ]);
                bkg2.iter_mut().zip(&shift).for_each(|(s, d)| *s += d * d);
            }
        }
        Ok(Measurement {
            unfolded,
            spectrum,
            syst_background: bkg2.into_iter().map(f64::sqrt).collect(),
            syst_mistag,
            negative_bins,
        })
    }

    /// Bias-corrected spectrum with every systematic source filled in.
    pub fn finalize(&self, m: &Measurement, bias: &BiasCorrection, smear: &[f64]) -> Result<AsymmetrySpectrum> {
        let mut s = m.spectrum.clone();
        s.a = bias.apply(&s.a);
        let deconv: Vec<f64> = bias.systematic.iter().zip(smear).map(|(b, s)| b.hypot(*s)).collect();
        s.set_systematic(SOURCE_EVENT_SELECTION, self.cfg.event_selection())?;
        s.set_systematic(SOURCE_BACKGROUND, m.syst_background.clone())?;
        s.set_systematic(SOURCE_MISTAG, m.syst_mistag.clone())?;
        s.set_systematic(SOURCE_DECONVOLUTION, deconv)?;
        Ok(s)
    }

    /// Unfolded (uncorrected) asymmetries of `replicas` pseudo-experiments.
    pub fn ensemble(&self, model: Model, purpose: u64, replicas: usize) -> Result<Vec<AsymmetrySpectrum>> {
        let base = derive_seed(self.cfg.seed, purpose, model_index(model));
        (0..replicas)
            .into_par_iter()
            .map(|r| {
                let raw = self.pseudo_data(model, derive_seed(base, 0, r as u64))?;
                let (u, _) = self.unfold_with(&raw, &Variation { mistag: self.cfg.detector.mistag_fraction, bkg_scale: None })?;
                u.asymmetry()
            })
            .collect()
    }

    /// Bias correction from QM, SD and PS-boundary ensembles.
    pub fn calibrate(&self, replicas: usize) -> Result<BiasCorrection> {
        let ensembles = CALIBRATION_MODELS
            .iter()
            .map(|&m| {
                Ok(ModelEnsemble {
                    label: m.name().to_string(),
                    truth: model_truth(m, &self.cfg.params, &self.cfg.binning)?,
                    unfolded: self.ensemble(m, TAG_CALIBRATION, replicas)?.into_iter().map(|s| s.a).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        bias_correct(&ensembles, replicas)
    }

    /// Per-bin pull statistics of bias-corrected asymmetries on an independent ensemble.
    pub fn validate_pulls(&self, model: Model, bias: &BiasCorrection, replicas: usize) -> Result<PullSummary> {
        let truth = model_truth(model, &self.cfg.params, &self.cfg.binning)?;
        let spectra = self.ensemble(model, TAG_VALIDATION, replicas)?;
        let pulls: Vec<Vec<f64>> = spectra
            .iter()
            .map(|s| {
                bias.apply(&s.a)
                    .iter()
                    .zip(&truth)
                    .zip(&s.stat_err)
                    .map(|((a, t), e)| (a - t) / e)
                    .collect()
            })
            .collect();
        Ok(PullSummary::from_pulls(model, &pulls))
    }

    /// Deconvolution systematic from varying the extra smearing term.
    pub fn smear_systematic(&self) -> Result<Vec<f64>> {
        let extra = self.cfg.detector.extra_smear_sigma;
        let delta = self.cfg.smear_delta_um;
        if delta == 0.0 {
            return Ok(vec![0.0; self.cfg.binning.len()]);
        }
        let (up, down) = match self.cfg.smear_variation {
            SmearVariation::Linear => (extra + delta, (extra - delta).max(0.0)),
            SmearVariation::Quadrature => (extra.hypot(delta), (extra * extra - delta * delta).sqrt()),
        };
        let reco = |sigma: f64| -> Result<Vec<f64>> {
            let mc = smeared_mc(&self.cfg, TAG_SMEAR, sigma)?;
            let c = bin_events(&mc, &self.cfg.binning, WhichDt::Reconstructed);
            Ok(dsvd_unfold(&c, &self.response, &self.cfg.unfold)?.asymmetry()?.a)
        };
        let nominal = reco(extra)?;
        let a_up = reco(up)?;
        let a_down = reco(down)?;
        Ok((0..nominal.len())
            .map(|i| (a_up[i] - nominal[i]).abs().max((a_down[i] - nominal[i]).abs()))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullSummary {
    pub model: Model,
    pub replicas: usize,
    pub mean: Vec<f64>,
    pub width: Vec<f64>,
}

impl PullSummary {
    pub fn from_pulls(model: Model, pulls: &[Vec<f64>]) -> Self {
        let n = pulls.first().map_or(0, Vec::len);
        let k = pulls.len() as f64;
        let mean: Vec<f64> = (0..n).map(|i| pulls.iter().map(|p| p[i]).sum::<f64>() / k).collect();
        let width = (0..n)
            .map(|i| (pulls.iter().map(|p| (p[i] - mean[i]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt())
            .collect();
        Self {
            model,
            replicas: pulls.len(),
            mean,
            width,
        }
    }
}

/// QM-vs-SD significance on fully corrected QM pseudo-experiments.
pub fn qm_sd_significances(p: &Pipeline, bias: &BiasCorrection, smear: &[f64], replicas: usize) -> Result<Vec<f64>> {
    let base = derive_seed(p.cfg.seed, TAG_VALIDATION + 1, 0);
    let fit_cfg = p.cfg.fit_config();
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let raw = p.pseudo_data(Model::Qm, derive_seed(base, 0, r as u64))?;
            let spec = p.finalize(&p.measure(&raw)?, bias, smear)?;
            let qm = fitkit::fit_model(&spec, FitModel::Qm, &fit_cfg)?;
            let sd = fitkit::fit_model(&spec, FitModel::Sd, &fit_cfg)?;
            Ok(fitkit::significance(&qm, &sd))
        })
        .collect()
}

/// One corrected pseudo-experiment (used by the CLI to exercise the chain end to end).
pub fn single_experiment(p: &Pipeline, model: Model, seed: u64, bias: &BiasCorrection, smear: &[f64]) -> Result<AsymmetrySpectrum> {
    let raw = p.pseudo_data(model, seed)?;
    p.finalize(&p.measure(&raw)?, bias, smear)
}
