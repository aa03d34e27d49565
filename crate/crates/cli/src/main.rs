use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use qsr_core::fisher::{
    compare_detectors_with, crb_errors, crb_errors_constrained, fisher_matrix_with, linear_apd_povm,
    MeasurementBudget,
};
use qsr_core::io::{self, DatasetMetadata};
use qsr_core::reconstruction::{chi_square, reconstruct, ReconstructionConfig};
use qsr_core::simulator::{
    self, fidelity_curve, log_spaced, simulate_surface, NoiseModel, SweepSetup, SyntheticDetector,
};
use qsr_core::states::{closest_reference_state, fidelity, mean_photon_number};
use qsr_core::tomography::{fit_all, grid_by_current, uniform_grid};
use qsr_core::{Family, Povm};

#[derive(Parser)]
#[command(name = "qsr", version, about = "Detector tomography and photon-number state reconstruction")]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a POVM to a coherent-state count-rate dataset.
    Tomo(TomoArgs),
    /// Reconstruct a photon-number distribution from per-setting click rates.
    Reconstruct(ReconstructArgs),
    /// Simulated fidelity-versus-mean sweep on the synthetic detector.
    Simulate(SimulateArgs),
    /// Cramér-Rao bounds for one detector or a two-detector comparison.
    Crb(CrbArgs),
    /// Write a synthetic tomography dataset and, optionally, state rates.
    Synth(SynthArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TomoArgs {
    dataset: PathBuf,
    #[arg(long, default_value_t = simulator::GRID_MIN_UA)]
    grid_min: f64,
    #[arg(long, default_value_t = simulator::GRID_MAX_UA)]
    grid_max: f64,
    #[arg(long, default_value_t = simulator::GRID_COUNT)]
    grid_count: usize,
    /// Fit the measured settings as they are instead of regridding.
    #[arg(long)]
    no_grid: bool,
    #[arg(long, default_value_t = 30)]
    n_mr: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FamilyArg {
    Coherent,
    Thermal,
    None,
}

#[derive(Args)]
struct ReconstructArgs {
    povm: PathBuf,
    rates: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    iterations: u64,
    #[arg(long, default_value_t = 30)]
    n_mr: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::None)]
    family: FamilyArg,
    /// Relative rate error used for the chi-square scores.
    #[arg(long, default_value_t = simulator::COHERENT_NOISE)]
    rel_error: f64,
    /// Stop once an iteration gains less log-likelihood than this (0 = never).
    #[arg(long, default_value_t = 0.0)]
    early_stop: f64,
    /// Use only the click outcomes in the EM update.
    #[arg(long)]
    click_only: bool,
    #[arg(long, default_value_t = 1000)]
    trace_every: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::Coherent)]
    family: FamilyArg,
    /// Comma-separated mean photon numbers.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15")]
    means: Vec<f64>,
    #[arg(long, default_value_t = simulator::DEFAULT_REPEATS)]
    repeats: usize,
    /// Relative noise amplitude (defaults to 0.02 for coherent, 0.06 for thermal).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, env = "QSR_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1_000_000)]
    iterations: u64,
    #[arg(long, default_value_t = 30)]
    n_mr: usize,
    /// Refit the detector on a fresh noisy surface for every repeat.
    #[arg(long)]
    refit: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct CrbArgs {
    /// Detector A (tomography or bare POVM file); the synthetic detector if omitted.
    #[arg(long)]
    povm: Option<PathBuf>,
    /// Detector B from a second POVM file.
    #[arg(long, conflicts_with = "apd_eta")]
    compare: Option<PathBuf>,
    /// Detector B is a linear APD of this efficiency, attenuated per setting so
    /// its single-photon efficiency matches detector A.
    #[arg(long)]
    apd_eta: Option<f64>,
    /// Probe state, FAMILY:MEAN.
    #[arg(long, default_value = "coherent:2.5")]
    state: String,
    #[arg(long, default_value_t = 6e8)]
    shots: f64,
    #[arg(long, default_value_t = 100)]
    settings: usize,
    #[arg(long, default_value_t = 13)]
    n_mr: usize,
    /// Bound on the normalization-preserving subspace.
    #[arg(long)]
    constrained: bool,
    #[arg(long)]
    click_only: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4.75)]
    current_min: f64,
    #[arg(long, default_value_t = 13.5)]
    current_max: f64,
    #[arg(long, default_value_t = 36)]
    current_count: usize,
    #[arg(long, default_value_t = simulator::POWER_MIN)]
    power_min: f64,
    #[arg(long, default_value_t = simulator::POWER_MAX)]
    power_max: f64,
    #[arg(long, default_value_t = simulator::POWER_COUNT)]
    power_count: usize,
    /// Relative noise amplitude on the tomography data.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, env = "QSR_SEED", default_value_t = 1)]
    seed: u64,
    /// Also write rates of this state, FAMILY:MEAN, at the tomography grid.
    #[arg(long)]
    state: Option<String>,
    /// Relative noise amplitude on the state rates.
    #[arg(long, default_value_t = 0.0)]
    state_noise: f64,
    #[arg(long, default_value_t = simulator::GRID_MIN_UA)]
    grid_min: f64,
    #[arg(long, default_value_t = simulator::GRID_MAX_UA)]
    grid_max: f64,
    #[arg(long, default_value_t = simulator::GRID_COUNT)]
    grid_count: usize,
    #[command(flatten)]
    out: OutArg,
}

/// Record of one run, written next to its outputs.
#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    parameters: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<&'a Value>,
}

struct Run {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(
        self,
        subcommand: &'static str,
        parameters: Value,
        inputs: &[&Path],
        seed: Option<u64>,
        summary: Option<&Value>,
    ) -> Result<()> {
        let manifest = Manifest {
            tool: "qsr",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            parameters,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs,
            seed,
            summary,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        io::write_atomic(&self.dir.join("manifest.json"), text.as_bytes())?;
        Ok(())
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn parse_state(text: &str) -> Result<(Family, f64)> {
    let (fam, mean) = text
        .split_once(':')
        .with_context(|| format!("state '{text}' is not FAMILY:MEAN"))?;
    let family: Family = fam.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mean: f64 = mean.parse().with_context(|| format!("bad mean in '{text}'"))?;
    Ok((family, mean))
}

fn family_of(arg: FamilyArg) -> Option<Family> {
    match arg {
        FamilyArg::Coherent => Some(Family::Coherent),
        FamilyArg::Thermal => Some(Family::Thermal),
        FamilyArg::None => None,
    }
}

/// Loads either a tomography POVM document or a bare POVM document.
fn load_any_povm(path: &Path) -> Result<Povm> {
    match io::load_povm(path) {
        Ok(fit) => Ok(fit.povm),
        Err(qsr_core::Error::Parse { .. }) => Ok(io::load_povm_elements(path)?),
        Err(e) => Err(e.into()),
    }
}

/// `k` indices spread evenly over `0..n`.
fn even_indices(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    if k == 1 {
        return vec![0];
    }
    (0..k).map(|i| (i * (n - 1) + (k - 1) / 2) / (k - 1)).collect()
}

fn cmd_tomo(a: &TomoArgs) -> Result<()> {
    let raw = io::load_dataset(&a.dataset)?;
    let surface = if a.no_grid {
        raw
    } else {
        if a.grid_count == 0 {
            bail!("--grid-count must be at least 1");
        }
        grid_by_current(&raw, &uniform_grid(a.grid_min, a.grid_max, a.grid_count))?
    };
    let fit = fit_all(&surface, a.n_mr)?;
    let mut run = Run::new(&a.out.out)?;
    io::save_povm(&run.path("povm.json"), &fit)?;

    let rows = fit.settings().iter().enumerate().map(|(i, s)| {
        let r = &fit.responses[i];
        let mut row = vec![i.to_string(), num(s.value()), num(r.eta)];
        row.extend(r.p.iter().map(|&p| num(p)));
        row.push(num(fit.residual[i]));
        row.push(fit.degenerate[i].to_string());
        row
    });
    io::write_table(
        &run.path("residuals.csv"),
        &["setting", "tuning_value", "eta", "p0", "p1", "p2", "p3", "p4", "residual", "degenerate"],
        rows,
    )?;

    let header: Vec<String> = std::iter::once("tuning_value".to_string())
        .chain((0..=a.n_mr).map(|n| format!("pi_{n}")))
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let curves = fit
        .settings()
        .iter()
        .zip(fit.povm.rows())
        .map(|(s, row)| std::iter::once(num(s.value())).chain(row.iter().map(|&x| num(x))).collect());
    io::write_table(&run.path("response_curves.csv"), &header_refs, curves)?;

    let max_residual = fit.residual.iter().copied().fold(0.0, f64::max);
    let degenerate = fit.degenerate.iter().filter(|&&d| d).count();
    println!(
        "fitted {} settings; max relative residual {max_residual:.3e}; {degenerate} degenerate",
        fit.responses.len()
    );
    let summary = json!({ "max_residual": max_residual, "degenerate_settings": degenerate });
    run.finish(
        "tomo",
        json!({
            "grid_min": a.grid_min, "grid_max": a.grid_max, "grid_count": a.grid_count,
            "no_grid": a.no_grid, "n_mr": a.n_mr,
        }),
        &[&a.dataset],
        None,
        Some(&summary),
    )
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let povm = load_any_povm(&a.povm)?;
    let measured = io::load_rates(&a.rates)?;
    let cfg = ReconstructionConfig {
        iterations: a.iterations,
        early_stop_delta: a.early_stop,
        n_mr: a.n_mr,
        include_no_click: !a.click_only,
        trace_every: a.trace_every,
    };
    let result = reconstruct(&povm, &measured, &cfg)?;
    let mut run = Run::new(&a.out.out)?;
    io::save_reconstruction(&run.path("reconstruction.json"), &result)?;

    let mean = mean_photon_number(&result.rho);
    let povm_t = povm.truncated(a.n_mr)?;
    let mut chi_rows = Vec::new();
    let mut chi = serde_json::Map::new();
    for family in [Family::Coherent, Family::Thermal] {
        let reference = closest_reference_state(&result.rho, family);
        let c = chi_square(&measured, &povm_t.predict(&reference)?, a.rel_error)?;
        let f = fidelity(&result.rho, &reference)?;
        chi_rows.push(vec![family.name().to_string(), num(c), num(f)]);
        chi.insert(family.name().into(), json!({ "chi2": c, "fidelity": f }));
    }
    io::write_table(&run.path("chi2.csv"), &["family", "chi2", "fidelity"], chi_rows)?;

    let family = family_of(a.family);
    let reference = family.map(|f| closest_reference_state(&result.rho, f));
    let mut header = vec!["n", "reconstructed"];
    if reference.is_some() {
        header.push("reference");
    }
    let bars = (0..=a.n_mr).map(|n| {
        let mut row = vec![n.to_string(), num(result.rho.get(n))];
        if let Some(r) = &reference {
            row.push(num(r.get(n)));
        }
        row
    });
    io::write_table(&run.path("distribution.csv"), &header, bars)?;

    let loglik = *result.loglik_trace.last().expect("trace is never empty");
    let mut summary = json!({
        "mean_photon_number": mean,
        "iterations_run": result.iterations_run,
        "log_likelihood": loglik,
        "families": chi,
    });
    match (family, &reference) {
        (Some(f), Some(r)) => {
            let fid = fidelity(&result.rho, r)?;
            summary["fidelity"] = json!(fid);
            println!("<n> = {mean:.4}; fidelity to closest {} state = {fid:.6}", f.name());
        }
        _ => println!("<n> = {mean:.4}; log-likelihood {loglik:.6}"),
    }
    run.finish(
        "reconstruct",
        json!({
            "iterations": a.iterations, "n_mr": a.n_mr, "family": a.family,
            "rel_error": a.rel_error, "early_stop": a.early_stop,
            "click_only": a.click_only, "trace_every": a.trace_every,
        }),
        &[&a.povm, &a.rates],
        None,
        Some(&summary),
    )
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let Some(family) = family_of(a.family) else {
        bail!("--family must be coherent or thermal");
    };
    let noise_level = a.noise.unwrap_or(match family {
        Family::Coherent => simulator::COHERENT_NOISE,
        Family::Thermal => simulator::THERMAL_NOISE,
    });
    let cfg = ReconstructionConfig {
        iterations: a.iterations,
        n_mr: a.n_mr,
        ..Default::default()
    };
    let setup = SweepSetup {
        refit_per_repeat: a.refit,
        ..Default::default()
    };
    let det = SyntheticDetector::default();
    let noise = NoiseModel::uniform(noise_level, a.seed);
    let points = fidelity_curve(&det, family, &a.means, a.repeats, &noise, &cfg, &setup)?;

    let mut run = Run::new(&a.out.out)?;
    let rows = points.iter().map(|p| {
        vec![
            num(p.mean),
            num(p.fidelity_mean),
            num(p.fidelity_spread),
            p.successes.to_string(),
            p.failures.len().to_string(),
        ]
    });
    io::write_table(
        &run.path("fidelity_curve.csv"),
        &["mean", "fidelity_mean", "fidelity_spread", "successes", "failures"],
        rows,
    )?;
    for p in &points {
        for (r, e) in &p.failures {
            log::warn!("mean {} repeat {r} failed: {e}", p.mean);
        }
        println!("<n> = {:<6} F = {:.6} +- {:.6}", p.mean, p.fidelity_mean, p.fidelity_spread);
    }
    run.finish(
        "simulate",
        json!({
            "family": a.family, "means": a.means, "repeats": a.repeats, "noise": noise_level,
            "iterations": a.iterations, "n_mr": a.n_mr, "refit": a.refit,
            "detector": det,
        }),
        &[],
        Some(a.seed),
        None,
    )
}

fn cmd_crb(a: &CrbArgs) -> Result<()> {
    if !(a.shots >= 1.0 && a.shots <= u64::MAX as f64 && a.shots.fract() == 0.0) {
        bail!("--shots must be a positive whole number");
    }
    if a.settings == 0 {
        bail!("--settings must be at least 1");
    }
    let (family, mean) = parse_state(&a.state)?;
    let rho = family.distribution(mean, a.n_mr)?;

    let det = SyntheticDetector::default();
    let povm_a = match &a.povm {
        Some(p) => {
            let full = load_any_povm(p)?;
            full.select(&even_indices(full.n_settings(), a.settings))?
                .truncated(a.n_mr)?
        }
        None => det.povm(&uniform_grid(simulator::GRID_MIN_UA, simulator::GRID_MAX_UA, a.settings), a.n_mr)?,
    };
    let povm_b = match (&a.compare, a.apd_eta) {
        (Some(p), _) => {
            let full = load_any_povm(p)?;
            Some(full.select(&even_indices(full.n_settings(), a.settings))?.truncated(a.n_mr)?)
        }
        (None, Some(eta)) => {
            let ts: Vec<f64> = povm_a.rows().map(|r| (r[1] / eta).min(1.0)).collect();
            Some(linear_apd_povm(eta, &ts, a.n_mr)?)
        }
        (None, None) if a.povm.is_none() => {
            let ts: Vec<f64> = povm_a
                .rows()
                .map(|r| (r[1] / simulator::REFERENCE_EFFICIENCY).min(1.0))
                .collect();
            Some(linear_apd_povm(simulator::REFERENCE_EFFICIENCY, &ts, a.n_mr)?)
        }
        (None, None) => None,
    };
    if let Some(b) = &povm_b {
        if b.n_settings() != povm_a.n_settings() {
            bail!(
                "detectors have {} and {} settings after selection",
                povm_a.n_settings(),
                b.n_settings()
            );
        }
    }
    let budget = MeasurementBudget::uniform(a.shots as u64, povm_a.n_settings())?;
    let bound = |povm: &Povm| -> Result<_> {
        let f = fisher_matrix_with(povm, &rho, &budget, !a.click_only)?;
        Ok(if a.constrained {
            crb_errors_constrained(&f, &rho)?
        } else {
            crb_errors(&f, &rho)?
        })
    };
    let report_a = bound(&povm_a)?;
    let mut run = Run::new(&a.out.out)?;
    io::save_crb(&run.path("crb.json"), &report_a)?;

    let mut summary = json!({ "condition_flag_a": report_a.condition_flag, "settings": povm_a.n_settings() });
    match &povm_b {
        None => {
            let rows = (0..=a.n_mr)
                .map(|n| vec![n.to_string(), num(rho.get(n)), num(report_a.sigma[n]), num(report_a.relative[n])]);
            io::write_table(&run.path("relative_errors.csv"), &["n", "rho", "sigma", "relative"], rows)?;
            for n in 0..=a.n_mr.min(8) {
                println!("n = {n}: relative error {:.4e}", report_a.relative[n]);
            }
        }
        Some(b) => {
            let report_b = bound(b)?;
            io::save_crb(&run.path("crb_b.json"), &report_b)?;
            let cmp = compare_detectors_with(&povm_a, b, &rho, &budget, !a.click_only, a.constrained)?;
            let rows = cmp.n.iter().enumerate().map(|(i, &n)| {
                vec![
                    n.to_string(),
                    num(rho.get(n)),
                    num(cmp.relative_a[i]),
                    num(cmp.relative_b[i]),
                    num(cmp.ratio[i]),
                ]
            });
            io::write_table(
                &run.path("comparison.csv"),
                &["n", "rho", "relative_a", "relative_b", "ratio"],
                rows,
            )?;
            for (i, &n) in cmp.n.iter().enumerate().take(9) {
                println!("n = {n}: ratio {:.4}", cmp.ratio[i]);
            }
            summary["condition_flag_b"] = json!(report_b.condition_flag);
        }
    }
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(a.povm.as_deref());
    inputs.extend(a.compare.as_deref());
    run.finish(
        "crb",
        json!({
            "state": a.state, "shots": a.shots, "settings": a.settings, "n_mr": a.n_mr,
            "apd_eta": a.apd_eta, "constrained": a.constrained, "click_only": a.click_only,
            "synthetic_detector": a.povm.is_none(),
        }),
        &inputs,
        None,
        Some(&summary),
    )
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let det = SyntheticDetector::default();
    let currents = uniform_grid(a.current_min, a.current_max, a.current_count);
    let powers = log_spaced(a.power_min, a.power_max, a.power_count);
    let surface = simulate_surface(&det, &currents, &powers, &NoiseModel::uniform(a.noise, a.seed))?;
    let mut run = Run::new(&a.out.out)?;
    let meta = DatasetMetadata {
        provenance: Some(format!("synthetic detector, seed {}", a.seed)),
        ..Default::default()
    };
    io::save_dataset(&run.path("dataset.csv"), &surface, &meta)?;
    if let Some(text) = &a.state {
        let (family, mean) = parse_state(text)?;
        let grid = uniform_grid(a.grid_min, a.grid_max, a.grid_count);
        let povm = det.povm(&grid, 30)?;
        let state = family.distribution(mean, 30)?;
        // state noise uses a seed stream separate from the tomography data
        let noise = NoiseModel::uniform(a.state_noise, a.seed.wrapping_add(1 << 32));
        let rates = simulator::simulate_rates(&povm, &state, &noise)?;
        io::save_rates(&run.path("rates.csv"), povm.settings(), &rates)?;
    }
    println!("wrote {} settings x {} powers", currents.len(), powers.len());
    run.finish(
        "synth",
        json!({
            "current_min": a.current_min, "current_max": a.current_max, "current_count": a.current_count,
            "power_min": a.power_min, "power_max": a.power_max, "power_count": a.power_count,
            "noise": a.noise, "state": a.state, "state_noise": a.state_noise,
            "grid_min": a.grid_min, "grid_max": a.grid_max, "grid_count": a.grid_count,
            "detector": det,
        }),
        &[],
        Some(a.seed),
        None,
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let outcome = match &cli.command {
        Command::Tomo(a) => cmd_tomo(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Crb(a) => cmd_crb(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
