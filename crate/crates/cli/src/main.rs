//! `bmix`: curves, toy generation, analysis, unfolding, fits and the fixture reproduction.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bmix_core::analysis::{
    self, background_templates, bin_events, correct_mistag, subtract_background, Binning, SOURCE_BACKGROUND,
};
use bmix_core::fitkit::{self, FitModel};
use bmix_core::study::Pipeline;
use bmix_core::toygen::{self, Category, GenerationSpec, WhichDt};
use bmix_core::unfold::{self, ResponsePair};
use bmix_core::{models, reproduce, Error, FlavourClass, Model};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "bmix", version, about = "B-meson flavour-entanglement toolkit")]
struct Cli {
    /// TOML run configuration; nominal defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pseudo-experiments per calibration model, overriding `run.replicas`.
    #[arg(long, global = true)]
    replicas: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Model asymmetry curves on a dt grid.
    Curves {
        #[arg(long, default_value_t = 0.0)]
        start: f64,
        #[arg(long, default_value_t = 20.0)]
        stop: f64,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        /// Override `model.dm` (ps^-1).
        #[arg(long)]
        dm: Option<f64>,
    },
    /// Toy events for one generating model.
    Generate {
        #[arg(long)]
        model: Option<Model>,
        #[arg(long)]
        n_signal: Option<u64>,
    },
    /// Bin events, subtract backgrounds, correct mistags.
    Analyze { events: PathBuf },
    /// Unfold raw reconstructed counts with bias correction and systematics.
    Unfold {
        counts: PathBuf,
        /// Directory holding response_of.csv and response_sf.csv; built from MC when omitted.
        #[arg(long)]
        response: Option<PathBuf>,
    },
    /// Fit models to an asymmetry spectrum.
    Fit {
        spectrum: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "qm,sd,ps,decohered")]
        models: Vec<FitModel>,
    },
    /// Fit the published asymmetry table and compare with the quoted results.
    Reproduce {
        /// Table in the spectrum layout; the shipped fixture when omitted.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files read and written by one stage, with content hashes.
struct Stage {
    command: &'static str,
    out: PathBuf,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct StageLog<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    constants: &'a RunConfig,
    details: Value,
}

impl Stage {
    fn new(command: &'static str, out: PathBuf, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self {
            command,
            out,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn finish(self, cfg: &RunConfig, details: Value) -> Result<()> {
        let log = StageLog {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            inputs: &self.inputs,
            outputs: &self.outputs,
            constants: cfg,
            details,
        };
        let mut text = serde_json::to_string_pretty(&log)?;
        text.push('\n');
        let path = self.out.join(format!("{}.log.json", self.command));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn check_binning(found: &Binning, cfg: &RunConfig, what: &str) -> Result<()> {
    let want = cfg.binning()?;
    if found.edges() != want.edges() {
        return Err(Error::BinningMismatch(format!(
            "{what} has edges {:?}, config has {:?}",
            found.edges(),
            want.edges()
        ))
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(r) = cli.replicas {
        cfg.run.replicas = r;
    }
    cfg.validate()?;
    let out = cli.out.clone().or_else(|| cfg.run.out.clone()).unwrap_or_else(|| PathBuf::from("bmix-out"));

    match cli.command {
        Command::Curves { start, stop, step, dm } => {
            if let Some(dm) = dm {
                cfg.model.dm = dm;
                cfg.model.validate()?;
            }
            let mut stage = Stage::new("curves", out, None)?;
            let rows = models::curve_rows(&models::grid(start, stop, step)?, &cfg.model)?;
            let mut buf = Vec::new();
            models::write_curves(&mut buf, &rows)?;
            stage.write("curves.csv", &buf)?;
            stage.finish(&cfg, json!({ "start": start, "stop": stop, "step": step, "rows": rows.len() }))
        }
        Command::Generate { model, n_signal } => {
            let seed = cfg.seed(cli.seed)?;
            let model = model.unwrap_or(cfg.run.generator);
            let spec = GenerationSpec {
                model,
                params: cfg.model,
                detector: cfg.detector,
                backgrounds: cfg.backgrounds.clone(),
                n_signal: n_signal.unwrap_or(cfg.run.n_signal),
                seed,
                events_per_stream: cfg.run.events_per_stream,
            };
            let mut stage = Stage::new("generate", out, Some(seed))?;
            let events = toygen::generate_events(&spec)?;
            let mut buf = Vec::new();
            toygen::write_events(&mut buf, &events)?;
            stage.write("events.csv", &buf)?;
            let n_bkg = events.iter().filter(|e| e.category != Category::Signal).count();
            stage.finish(
                &cfg,
                json!({
                    "model": model,
                    "n_signal": spec.n_signal,
                    "n_background": n_bkg,
                    "n_events": events.len(),
                }),
            )
        }
        Command::Analyze { events } => {
            let mut stage = Stage::new("analyze", out, None)?;
            let events = toygen::read_events(stage.read(&events)?.as_slice())?;
            let binning = cfg.binning()?;
            let raw = bin_events(&events, &binning, WhichDt::Reconstructed);
            let templates = background_templates(&cfg.backgrounds, &binning, &cfg.model)?;
            let sub = subtract_background(&raw, &templates)?;
            let mut observed = analysis::asymmetry(&sub.counts)?;
            observed.set_systematic(SOURCE_BACKGROUND, sub.systematic.clone())?;
            let spectrum = correct_mistag(&observed, cfg.detector.mistag_fraction, cfg.analysis.mistag_err)?;

            let mut buf = Vec::new();
            analysis::write_counts(&mut buf, &raw)?;
            stage.write("counts.csv", &buf)?;
            buf.clear();
            analysis::write_counts(&mut buf, &sub.counts)?;
            stage.write("counts_subtracted.csv", &buf)?;
            buf.clear();
            analysis::write_spectrum(&mut buf, &spectrum)?;
            stage.write("spectrum.csv", &buf)?;
            let subtracted: f64 = raw.total().iter().sum::<f64>() - sub.counts.total().iter().sum::<f64>();
            stage.finish(
                &cfg,
                json!({
                    "events": events.len(),
                    "overflow": raw.overflow,
                    "background_subtracted": subtracted,
                    "negative_bins": sub.negative_bins,
                    "degenerate_bins": spectrum.degenerate,
                }),
            )
        }
        Command::Unfold { counts, response } => {
            let seed = cfg.seed(cli.seed)?;
            let mut stage = Stage::new("unfold", out, Some(seed))?;
            let raw = analysis::read_counts(stage.read(&counts)?.as_slice())?;
            check_binning(&raw.binning, &cfg, "counts file")?;
            let study = cfg.study(seed)?;
            let pipeline = match &response {
                Some(dir) => {
                    let mut load = |cls: FlavourClass| -> Result<unfold::ResponseMatrix> {
                        let path = dir.join(format!("response_{}.csv", cls.to_string().to_lowercase()));
                        let r = unfold::read_response(stage.read(&path)?.as_slice())?;
                        if r.class != cls {
                            return Err(Error::InvalidParameter(format!("{} holds the {} response", path.display(), r.class)).into());
                        }
                        check_binning(&r.binning, &cfg, &path.display().to_string())?;
                        Ok(r)
                    };
                    let response = ResponsePair {
                        of: load(FlavourClass::Of)?,
                        sf: load(FlavourClass::Sf)?,
                    };
                    let templates = background_templates(&study.backgrounds, &study.binning, &study.params)?;
                    Pipeline {
                        cfg: study,
                        response,
                        templates,
                    }
                }
                None => {
                    let p = Pipeline::new(study)?;
                    for r in [&p.response.of, &p.response.sf] {
                        let mut buf = Vec::new();
                        unfold::write_response(&mut buf, r)?;
                        stage.write(&format!("response_{}.csv", r.class.to_string().to_lowercase()), &buf)?;
                    }
                    p
                }
            };
            let m = pipeline.measure(&raw)?;
            let bias = pipeline.calibrate(cfg.run.replicas)?;
            let smear = pipeline.smear_systematic()?;
            let spectrum = pipeline.finalize(&m, &bias, &smear)?;
            let mut buf = Vec::new();
            analysis::write_spectrum(&mut buf, &spectrum)?;
            stage.write("unfolded.csv", &buf)?;
            stage.finish(
                &cfg,
                json!({
                    "replicas": cfg.run.replicas,
                    "bias_correction": bias.correction,
                    "bias_systematic": bias.systematic,
                    "per_model_bias": bias.per_model_bias,
                    "smear_systematic": smear,
                    "negative_bins": m.negative_bins,
                }),
            )
        }
        Command::Fit { spectrum, models } => {
            let mut stage = Stage::new("fit", out, None)?;
            let spec = analysis::read_spectrum(stage.read(&spectrum)?.as_slice())?;
            let fit_cfg = cfg.fit();
            let fits = models
                .iter()
                .map(|&m| fitkit::fit(&spec, m, &fit_cfg))
                .collect::<bmix_core::Result<Vec<_>>>()?;
            let mut buf = Vec::new();
            fitkit::write_report(&mut buf, &spec, &fits)?;
            stage.write("fit_report.txt", &buf)?;
            let summary: Vec<Value> = fits
                .iter()
                .map(|f| json!({ "model": f.model, "theta_hat": f.theta_hat, "theta_err": f.theta_err, "chi2": f.chi2, "flags": f.flags }))
                .collect();
            stage.finish(&cfg, json!({ "fits": summary }))
        }
        Command::Reproduce { fixture } => {
            let mut stage = Stage::new("reproduce", out, None)?;
            let spec = match &fixture {
                Some(path) if !path.exists() => {
                    return Err(Error::InvalidParameter(format!("fixture {} not found", path.display())).into())
                }
                Some(path) => analysis::read_spectrum(stage.read(path)?.as_slice())?,
                None => analysis::table1(),
            };
            let r = reproduce::reproduce(&spec, &cfg.fit())?;
            let mut table = Vec::new();
            r.write_table(&mut table)?;
            print!("{}", String::from_utf8_lossy(&table));
            stage.write("reproduce.txt", &table)?;
            let mut buf = Vec::new();
            fitkit::write_report(&mut buf, &spec, &r.fits)?;
            stage.write("fit_report.txt", &buf)?;
            stage.finish(
                &cfg,
                json!({
                    "fixture": fixture.map_or_else(|| "shipped".to_string(), |p| p.display().to_string()),
                    "checks": r.checks.iter().map(|c| json!({ "label": c.label, "published": c.published, "computed": c.computed, "tolerance": c.tolerance, "pass": c.pass() })).collect::<Vec<_>>(),
                    "midpoint_rule_shift": r.midpoint_shift,
                }),
            )
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(2, |e| if e.is_numerical() { 3 } else { 2 })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
