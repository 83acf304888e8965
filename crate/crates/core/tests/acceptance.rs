//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failures are reported and the binary still exits 0 so the rest of the
//! workspace tests run; set ACCEPTANCE_STRICT=1 to exit nonzero on any FAIL.

use std::time::{Duration, Instant};

use bmix_core::analysis::{asymmetry, bin_events, table1, Binning, SOURCE_DECONVOLUTION, SOURCE_MISTAG};
use bmix_core::fitkit::{self, fit_lifetime_events, fit_zeta, predictions, BinRule, FitConfig, FitModel, Prediction};
use bmix_core::models::{self, asym_sd_marginal, ps_bounds_joint};
use bmix_core::quad::{integrate, QuadOptions};
use bmix_core::study::{qm_sd_significances, Pipeline, StudyConfig, CALIBRATION_MODELS};
use bmix_core::toygen::{generate_events, BackgroundConfig, DetectorConfig, GenerationSpec, WhichDt};
use bmix_core::unfold::{svd_unfold_class, Regularization};
use bmix_core::{Model, ModelParams};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { pass: true, lines: Vec::new() }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {line}", if ok { "ok  " } else { "MISS" }));
    }
}

fn run(name: &str, budget: Option<Duration>, f: impl FnOnce(&mut Outcome)) -> bool {
    let mut o = Outcome::new();
    let t0 = Instant::now();
    f(&mut o);
    let elapsed = t0.elapsed().as_secs_f64();
    match budget {
        Some(b) => o.check(elapsed <= b.as_secs_f64(), format!("runtime {elapsed:.1} s (budget {:.0} s)", b.as_secs_f64())),
        None => o.lines.push(format!("     runtime {elapsed:.1} s")),
    }
    println!("{} {name}", if o.pass { "PASS" } else { "FAIL" });
    for l in &o.lines {
        println!("       {l}");
    }
    o.pass
}

fn within(o: &mut Outcome, label: &str, got: f64, want: f64, tol: f64) {
    o.check((got - want).abs() <= tol, format!("{label} = {got:.4} (want {want} +- {tol})"));
}

fn fixture_fits(o: &mut Outcome) {
    let t = table1();
    let cfg = FitConfig::default();
    let qm = fitkit::fit_model(&t, FitModel::Qm, &cfg).unwrap();
    let sd = fitkit::fit_model(&t, FitModel::Sd, &cfg).unwrap();
    let ps = fitkit::fit_model(&t, FitModel::Ps, &cfg).unwrap();
    within(o, "QM dm", qm.theta_hat, 0.501, 0.005);
    within(o, "QM dm error", qm.theta_err, 0.009, 0.002);
    within(o, "QM chi2", qm.chi2, 5.2, 1.0);
    within(o, "SD dm", sd.theta_hat, 0.419, 0.010);
    within(o, "SD chi2", sd.chi2, 174.0, 10.0);
    within(o, "PS dm", ps.theta_hat, 0.447, 0.015);
    within(o, "PS chi2", ps.chi2, 31.3, 5.0);
}

fn significances(o: &mut Outcome) {
    let t = table1();
    let cfg = FitConfig::default();
    let qm = fitkit::fit_model(&t, FitModel::Qm, &cfg).unwrap();
    let sd = fitkit::fit_model(&t, FitModel::Sd, &cfg).unwrap();
    let ps = fitkit::fit_model(&t, FitModel::Ps, &cfg).unwrap();
    // independent of the library's helper: straight from the chi2 values
    within(o, "sqrt(chi2_SD - chi2_QM)", (sd.chi2 - qm.chi2).sqrt(), 13.0, 0.5);
    within(o, "sqrt(chi2_PS - chi2_QM)", (ps.chi2 - qm.chi2).sqrt(), 5.1, 0.3);
    o.check(
        (fitkit::significance(&qm, &sd) - (sd.chi2 - qm.chi2).sqrt()).abs() < 1e-12,
        "library significance equals sqrt(delta chi2)".into(),
    );
}

fn decoherence(o: &mut Outcome) {
    let f = fit_zeta(&table1(), &FitConfig::default()).unwrap();
    within(o, "zeta", f.theta_hat, 0.029, 0.02);
    within(o, "zeta error", f.theta_err, 0.057, 0.01);
}

fn curve_oracles(o: &mut Outcome) {
    let p = ModelParams::default();
    let rate = 2.0 / p.tau;
    let mut worst = 0.0f64;
    for dt in models::grid(0.0, 20.0, 0.1).unwrap() {
        let q = integrate(
            |u| (p.dm * u).cos() * (p.dm * (u + dt)).cos() * rate * (-rate * u).exp(),
            0.0,
            40.0 * p.tau,
            &[],
            QuadOptions::abs(1e-12),
        )
        .unwrap()
        .value;
        worst = worst.max((q - asym_sd_marginal(dt, &p).unwrap()).abs());
    }
    o.check(worst <= 1e-9, format!("max |closed form - quadrature| = {worst:.2e} over 201 points (want <= 1e-9)"));
    let a0 = asym_sd_marginal(0.0, &p).unwrap();
    o.check((a0 - 0.8122).abs() < 5e-5, format!("A_SD(0) = {a0:.6} (want 0.8122)"));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    for _ in 0..10_000 {
        let (t_min, dt): (f64, f64) = (rng.random_range(0.0..30.0), rng.random_range(0.0..20.0));
        let (x, s, c) = (p.dm * t_min, (p.dm * dt).sin(), (p.dm * dt).cos());
        let psi = (1.0 + c) * x.cos() - s * x.sin();
        let lower = ps_bounds_joint(t_min, dt, &p).unwrap().lower;
        if (2.0 + psi).min(2.0 - psi) != 2.0 - psi.abs() || (lower - (psi.abs() - 1.0)).abs() > 1e-14 {
            bad += 1;
        }
    }
    o.check(bad == 0, format!("min(2+psi, 2-psi) = 2-|psi| on 10^4 points ({bad} violations)"));
}

fn generator_closure(o: &mut Outcome) {
    let p = ModelParams::default();
    let b = Binning::default();
    let events = generate_events(&GenerationSpec {
        model: Model::Qm,
        params: p,
        detector: DetectorConfig::ideal(),
        backgrounds: BackgroundConfig::none(),
        n_signal: 1_000_000,
        seed: 2024,
        events_per_stream: 1 << 16,
    })
    .unwrap();
    let c = bin_events(&events, &b, WhichDt::True);
    let s = asymmetry(&c).unwrap();
    let pred: Vec<f64> = predictions(FitModel::Qm, &p, &b, BinRule::RateWeighted)
        .unwrap()
        .into_iter()
        .map(|x| match x {
            Prediction::Value(v) => v,
            Prediction::Band(_) => unreachable!(),
        })
        .collect();
    let pulls: Vec<f64> = (0..b.len()).map(|i| (s.a[i] - pred[i]) / s.stat_err[i]).collect();
    let worst = pulls.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    o.check(worst <= 3.0, format!("max |pull| = {worst:.2} over 11 bins (want <= 3)"));
    let chi2_ndf = pulls.iter().map(|v| v * v).sum::<f64>() / 11.0;
    o.check((0.4..=2.1).contains(&chi2_ndf), format!("chi2/11 = {chi2_ndf:.3} (want in [0.4, 2.1])"));

    let dts: Vec<f64> = events.iter().map(|e| e.dt_true).collect();
    let f = fit_lifetime_events(&dts, (0.0, 20.0), &b).unwrap();
    let n_sigma = (f.theta_hat - p.tau).abs() / f.theta_err;
    o.check(
        n_sigma <= 2.0,
        format!("tau = {:.4} +- {:.4} ps, {n_sigma:.2} sigma from {} (want <= 2)", f.theta_hat, f.theta_err, p.tau),
    );
}

fn unfolding(o: &mut Outcome) {
    let cfg = StudyConfig {
        replicas: 200,
        seed: 11,
        ..StudyConfig::default()
    };
    let replicas = cfg.replicas;
    let pipeline = Pipeline::new(cfg).unwrap();
    let n = pipeline.cfg.binning.len();

    // noiseless full-rank closure on the full-scale response
    let mut worst = 0.0f64;
    for r in [&pipeline.response.of, &pipeline.response.sf] {
        let prob = r.probabilities();
        for model in [Model::Qm, Model::Sd] {
            let truth: Vec<f64> = (0..n)
                .map(|i| {
                    let (lo, hi) = pipeline.cfg.binning.bounds(i);
                    let base = (-lo / 1.53f64).exp() - (-hi / 1.53f64).exp();
                    base * 1e4 * (1.0 + 0.5 * model.marginal_asymmetry(0.5 * (lo + hi), &pipeline.cfg.params).unwrap())
                })
                .collect();
            let m: Vec<f64> = (&prob * DVector::from_column_slice(&truth)).iter().copied().collect();
            let u = svd_unfold_class(&m, r, n, Regularization::Curvature).unwrap();
            let scale = truth.iter().fold(0.0f64, |a, v| a.max(*v));
            worst = worst.max(u.truth.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
        }
    }
    o.check(worst <= 1e-8, format!("noiseless full-rank closure: max relative deviation {worst:.1e} (want <= 1e-8)"));

    let bias = pipeline.calibrate(replicas).unwrap();
    for model in CALIBRATION_MODELS {
        let s = pipeline.validate_pulls(model, &bias, replicas).unwrap();
        let bad_mean: Vec<String> = (0..n)
            .filter(|&i| s.mean[i].abs() >= 0.2)
            .map(|i| format!("bin {} {:+.2}", i + 1, s.mean[i]))
            .collect();
        let bad_width: Vec<String> = (0..n)
            .filter(|&i| (s.width[i] - 1.0).abs() > 0.15)
            .map(|i| format!("bin {} {:.2}", i + 1, s.width[i]))
            .collect();
        let max_mean = s.mean.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        o.check(
            bad_mean.is_empty(),
            format!("{model}: max |pull mean| {max_mean:.2} (want < 0.2) {}", bad_mean.join(", ")),
        );
        let (wmin, wmax) = s.width.iter().fold((f64::MAX, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        o.check(
            bad_width.is_empty(),
            format!("{model}: pull width in [{wmin:.2}, {wmax:.2}] (want 1 +- 0.15) {}", bad_width.join(", ")),
        );
    }

    let smear = pipeline.smear_systematic().unwrap();
    let sig = qm_sd_significances(&pipeline, &bias, &smear, replicas).unwrap();
    let frac = sig.iter().filter(|&&z| z > 5.0).count() as f64 / sig.len() as f64;
    let mut sorted = sig.clone();
    sorted.sort_by(f64::total_cmp);
    o.check(
        frac >= 0.9,
        format!(
            "QM over SD > 5 sigma in {:.1}% of {} replicas (want >= 90%; median {:.2}, min {:.2})",
            100.0 * frac,
            sig.len(),
            sorted[sorted.len() / 2],
            sorted[0]
        ),
    );
}

fn systematics(o: &mut Outcome) {
    let cfg = StudyConfig {
        seed: 11,
        ..StudyConfig::default()
    };
    let pipeline = Pipeline::new(cfg).unwrap();
    let raw = pipeline.pseudo_data(Model::Qm, 77).unwrap();
    let m = pipeline.measure(&raw).unwrap();
    let bias = pipeline.calibrate(50).unwrap();
    let smear = pipeline.smear_systematic().unwrap();
    let spec = pipeline.finalize(&m, &bias, &smear).unwrap();
    let t = table1();

    let compare = |o: &mut Outcome, label: &str, ours: &[f64], theirs: &[f64]| {
        let ratios: Vec<f64> = (0..9).map(|i| ours[i] / theirs[i]).collect();
        let ok = ours[..9].iter().all(|v| *v > 0.0) && ratios.iter().all(|r| (0.1..=10.0).contains(r));
        let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
        o.check(ok, format!("{label}: ratio to published column, bins 1-9 = [{}] (want nonzero, in [0.1, 10])", shown.join(", ")));
    };
    compare(o, "mistag +-0.005", &m.syst_mistag, t.systematic(SOURCE_MISTAG).unwrap());
    compare(o, "smearing +-35 um", &smear, t.systematic(SOURCE_DECONVOLUTION).unwrap());

    let mut worst = 0.0f64;
    for i in 0..spec.len() {
        let sum2: f64 = spec.syst_breakdown.iter().map(|(_, v)| v[i] * v[i]).sum();
        worst = worst.max((spec.syst_err[i] - sum2.sqrt()).abs());
        worst = worst.max((spec.total_err()[i] - spec.stat_err[i].hypot(spec.syst_err[i])).abs());
    }
    let sources: Vec<&str> = spec.syst_breakdown.iter().map(|(n, _)| n.as_str()).collect();
    o.check(
        worst <= 1e-12 && sources.len() == 4,
        format!("quadrature of {sources:?}: max deviation {worst:.1e} (want <= 1e-12)"),
    );
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let results = [
        run("fixture fits reproduce the published QM, SD and PS fits", secs(10), fixture_fits),
        run("significances on the fixture fits", None, significances),
        run("decoherence fit on the fixture", None, decoherence),
        run("model-curve oracles", secs(5), curve_oracles),
        run("generator closure at 10^6 events", secs(60), generator_closure),
        run("unfolding closure and calibration at full scale", secs(30 * 60), unfolding),
        run("systematics plumbing", None, systematics),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
