use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use qfc_core::chain::{predict_rates, predict_snr, RateCascade};
use qfc_core::config::{Arm, RunConfig, SetupChoice};
use qfc_core::correlator::{Estimate, G2Result, HomResult, PeakAreas};
use qfc_core::fitting::{fit, read_csv, FitProblem, FitResult, Model};
use qfc_core::montecarlo::SimSummary;
use qfc_core::phasematch::TuningAxis;
use qfc_core::pipeline::{self, Correlation, PhaseMatchOutput};
use qfc_core::tagstore::sidecar_path;
use qfc_core::{Error, ErrorKind};

use crate::output::RunDir;
use crate::{AnalysisArgs, Command, ConfigArg};

/// A failed command: message plus process exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 1,
            ErrorKind::Solver => 2,
            ErrorKind::Simulation => 3,
            ErrorKind::Analysis => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    /// Reading user-supplied data: unreadable input counts as an analysis failure.
    fn input(e: Error) -> Self {
        let mut f = Failure::from(e);
        if f.code == 3 {
            f.code = 4;
        }
        f
    }
}

type CmdResult = Result<(), Failure>;

pub fn run(command: Command) -> CmdResult {
    match command {
        Command::Phasematch {
            config,
            axis,
            range,
            samples,
            signal,
            out,
        } => phasematch(&config, axis, range, samples, &signal, &out),
        Command::Chain {
            config,
            pump_power,
            out,
        } => chain(&config, pump_power, &out),
        Command::Simulate {
            config,
            setup,
            arm,
            pulses,
            seed,
            out,
        } => simulate(&config, setup, arm, pulses, seed, &out),
        Command::Correlate { tags, analysis, out } => correlate(&tags, &analysis, &out),
        Command::Hom {
            co,
            cross,
            g2,
            analysis,
            out,
        } => hom(&co, &cross, &g2, &analysis, &out),
        Command::Fit {
            data,
            model,
            guess,
            fix,
            out,
        } => fit_data(&data, model, guess, &fix, &out),
        Command::Report {
            config,
            pulses,
            seed,
            out,
        } => report(&config, pulses, seed, &out),
    }
}

const PRESET: &str = "built-in preset";

fn load_config(path: Option<&Path>) -> Result<(RunConfig, String), Error> {
    match path {
        Some(p) => Ok((RunConfig::load(p)?, p.display().to_string())),
        None => Ok((RunConfig::preset(), PRESET.to_string())),
    }
}

fn axis_name(axis: TuningAxis) -> &'static str {
    match axis {
        TuningAxis::Temperature => "temperature",
        TuningAxis::SignalWavelength => "signal_wavelength",
        TuningAxis::PumpWavelength => "pump_wavelength",
    }
}

fn axis_unit(axis: TuningAxis) -> &'static str {
    match axis {
        TuningAxis::Temperature => "°C",
        _ => "nm",
    }
}

#[derive(Serialize)]
struct PhaseMatchDoc<'a> {
    config: &'a RunConfig,
    curves: &'a [PhaseMatchOutput],
}

fn phasematch(
    config: &ConfigArg,
    axis: TuningAxis,
    range: Option<(f64, f64)>,
    samples: usize,
    signals: &[f64],
    out: &Path,
) -> CmdResult {
    let (cfg, source) = load_config(config.config.as_deref())?;
    let targets: Vec<Option<f64>> = if signals.is_empty() {
        vec![None]
    } else {
        signals.iter().copied().map(Some).collect()
    };
    let mut curves = Vec::new();
    for signal in targets {
        curves.push(pipeline::phasematch_curve(&cfg, axis, signal, range, samples)?);
    }
    let mut dir = RunDir::create(out)?;
    let unit = axis_unit(axis);
    for c in &curves {
        let name = if signals.is_empty() {
            format!("phasematch_{}.csv", axis_name(axis))
        } else {
            format!("phasematch_{}_{}nm.csv", axis_name(axis), c.signal)
        };
        dir.write_with(&name, |w| c.curve.write_csv(w))?;
        let fwhm = c
            .curve
            .fwhm
            .map_or_else(|| "n/a".to_string(), |f| format!("{f:.4} {unit}"));
        println!(
            "signal {:.3} nm: T_pm {:.3} °C, Λ {:.4} µm (bulk {:.4} µm), FWHM {fwhm}",
            c.signal, c.temperature, c.poling_period, c.bulk_poling_period
        );
        for w in &c.curve.warnings {
            eprintln!("warning: {w}");
        }
    }
    dir.write_json(
        "phasematch.json",
        &PhaseMatchDoc {
            config: &cfg,
            curves: &curves,
        },
    )?;
    dir.finish("phasematch", &source)?;
    Ok(())
}

#[derive(Serialize)]
struct ChainDoc<'a> {
    config: &'a RunConfig,
    pump_power: f64,
    efficiency: f64,
    rates: &'a RateCascade,
    predicted_snr: f64,
}

fn chain(config: &ConfigArg, pump_power: Option<f64>, out: &Path) -> CmdResult {
    let (mut cfg, source) = load_config(config.config.as_deref())?;
    if let Some(p) = pump_power {
        cfg.chain = cfg.chain.with_pump_power(p);
        cfg.validate()?;
    }
    let rates = predict_rates(&cfg.chain, &cfg.emitter)?;
    let snr = predict_snr(&cfg.chain, &cfg.emitter)?;
    println!("{:<18} {:>14} {:>14}", "stage", "signal [Hz]", "noise [Hz]");
    println!("{:<18} {:>14.4e} {:>14.4e}", "input", rates.input, 0.0);
    for s in &rates.stages {
        println!("{:<18} {:>14.4e} {:>14.4e}", s.name, s.signal, s.noise);
    }
    println!("efficiency {:.5}, output {:.4} MHz, SNR {:.1}", rates.efficiency, rates.output * 1e-6, snr);
    let mut dir = RunDir::create(out)?;
    dir.write_json(
        "chain.json",
        &ChainDoc {
            config: &cfg,
            pump_power: cfg.chain.pump_power,
            efficiency: rates.efficiency,
            rates: &rates,
            predicted_snr: snr,
        },
    )?;
    dir.finish("chain", &source)?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateDoc<'a> {
    config: &'a RunConfig,
    setup: SetupChoice,
    arm: Arm,
    tag_file: String,
    summary: &'a SimSummary,
}

fn simulate(
    config: &ConfigArg,
    setup: SetupChoice,
    arm: Option<Arm>,
    pulses: Option<u64>,
    seed: Option<u64>,
    out: &Path,
) -> CmdResult {
    let (mut cfg, source) = load_config(config.config.as_deref())?;
    if let Some(p) = pulses {
        cfg.simulation.pulses = p;
    }
    if let Some(s) = seed {
        cfg.simulation.seed = s;
    }
    if let Some(a) = arm {
        cfg.simulation.arm = a;
    }
    cfg.validate()?;
    let sim = &cfg.simulation;
    let run = cfg.sim_run(setup, sim.arm, sim.pulses, sim.seed);
    let mut dir = RunDir::create(out)?;
    let name = format!("{}_{setup}.tags", sim.arm);
    let path = dir.path(&name);
    let summary = pipeline::simulate_to_file(&run, setup, sim.arm, &path)?;
    dir.path(&format!("{name}.meta.json"));
    println!(
        "{} pulses, {} + {} tags ({} + {} background), {} removed by dead time",
        summary.pulses,
        summary.tags[0],
        summary.tags[1],
        summary.background_tags[0],
        summary.background_tags[1],
        summary.dead_time_removed[0] + summary.dead_time_removed[1]
    );
    println!("{}", path.display());
    dir.write_json(
        "simulate.json",
        &SimulateDoc {
            config: &cfg,
            setup,
            arm: sim.arm,
            tag_file: name.clone(),
            summary: &summary,
        },
    )?;
    dir.finish("simulate", &source)?;
    Ok(())
}

/// Analysis settings: config, then flags on top.
fn analysis_config(args: &AnalysisArgs) -> Result<(RunConfig, String), Error> {
    let (mut cfg, source) = load_config(args.config.as_deref())?;
    let a = &mut cfg.analysis;
    if let Some(b) = args.bin {
        a.bin_width = b as f64;
    }
    if let Some(r) = args.range {
        a.range = r as f64;
    }
    if let Some(w) = args.window {
        a.window = w;
    }
    if let Some(p) = args.period {
        a.period = Some(p);
    }
    cfg.validate()?;
    Ok((cfg, source))
}

/// Peak period for a tag file: flag, else the emitter recorded next to the
/// file, else the config.
fn period_for(tags: &Path, args: &AnalysisArgs, cfg: &RunConfig) -> f64 {
    if let Some(p) = args.period {
        return p;
    }
    let from_sidecar = std::fs::read_to_string(sidecar_path(tags))
        .ok()
        .and_then(|text| serde_json::from_str::<serde_json::Value>(&text).ok())
        .and_then(|v| v.pointer("/run/emitter/rep_rate").and_then(|r| r.as_f64()))
        .filter(|r| *r > 0.0);
    match from_sidecar {
        Some(rate) => 1e12 / rate,
        None => cfg.period_ps(),
    }
}

#[derive(Serialize)]
struct CorrelationDoc<'a> {
    config: &'a RunConfig,
    tag_file: String,
    period: f64,
    coincidences: u64,
    g2: &'a G2Result,
    peaks: &'a PeakAreas,
    warnings: &'a [String],
}

fn correlate_one(tags: &Path, args: &AnalysisArgs, cfg: &RunConfig) -> Result<(f64, Correlation), Failure> {
    let period = period_for(tags, args, cfg);
    let corr = pipeline::correlate_file(tags, &cfg.analysis, period).map_err(Failure::input)?;
    for w in &corr.warnings {
        eprintln!("warning: {}: {w}", tags.display());
    }
    Ok((period, corr))
}

fn correlation_doc<'a>(cfg: &'a RunConfig, tags: &Path, period: f64, corr: &'a Correlation) -> CorrelationDoc<'a> {
    CorrelationDoc {
        config: cfg,
        tag_file: tags.display().to_string(),
        period,
        coincidences: corr.histogram.total(),
        g2: &corr.g2,
        peaks: &corr.peaks,
        warnings: &corr.warnings,
    }
}

fn correlate(tags: &Path, args: &AnalysisArgs, out: &Path) -> CmdResult {
    let (cfg, source) = analysis_config(args)?;
    let (period, corr) = correlate_one(tags, args, &cfg)?;
    println!(
        "g2(0) = {:.4} ± {:.4} (zero-delay area {}, side mean {:.2} over {} peaks)",
        corr.g2.g2.value, corr.g2.g2.error, corr.g2.zero_area, corr.g2.side_mean, corr.g2.side_peaks
    );
    let mut dir = RunDir::create(out)?;
    dir.write_with("histogram.csv", |w| corr.histogram.write_csv(w))?;
    dir.write_json("correlation.json", &correlation_doc(&cfg, tags, period, &corr))?;
    dir.finish("correlate", &source)?;
    Ok(())
}

/// `value`, `value:error`, or a JSON document with a `g2` estimate.
fn parse_g2(spec: &str) -> Result<Estimate, Failure> {
    let number = |s: &str| s.trim().parse::<f64>().ok();
    if let Some(v) = number(spec) {
        return Ok(Estimate::exact(v));
    }
    if let Some((v, e)) = spec.split_once(':') {
        if let (Some(v), Some(e)) = (number(v), number(e)) {
            return Ok(Estimate::new(v, e));
        }
    }
    let path = PathBuf::from(spec);
    let text = std::fs::read_to_string(&path).map_err(|source| Failure::input(Error::Io { path, source }))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::input(e.into()))?;
    // Accepts both `{"g2": {"g2": {...}}}` (correlate output) and `{"g2": {...}}`.
    let est = doc
        .pointer("/g2/g2")
        .or_else(|| doc.get("g2"))
        .and_then(|g| Some((g.get("value")?.as_f64()?, g.get("error")?.as_f64()?)));
    match est {
        Some((v, e)) => Ok(Estimate::new(v, e)),
        None => Err(Failure::input(Error::Format(format!("{spec}: no g2 value/error found")))),
    }
}

#[derive(Serialize)]
struct HomDoc<'a> {
    config: &'a RunConfig,
    g2: Estimate,
    hom: &'a HomResult,
    co: CorrelationDoc<'a>,
    cross: CorrelationDoc<'a>,
}

fn hom(co: &Path, cross: &Path, g2: &str, args: &AnalysisArgs, out: &Path) -> CmdResult {
    let g2 = parse_g2(g2)?;
    let (cfg, source) = analysis_config(args)?;
    let (p_co, c_co) = correlate_one(co, args, &cfg)?;
    let (p_cross, c_cross) = correlate_one(cross, args, &cfg)?;
    let result = HomResult::from_parts(c_co.g2.g2, c_cross.g2.g2, g2)?;
    println!(
        "g2_par {:.4} ± {:.4}, g2_perp {:.4} ± {:.4}",
        result.g2_parallel.value, result.g2_parallel.error, result.g2_perp.value, result.g2_perp.error
    );
    println!(
        "V_HOM = {:.4} ± {:.4}, M_s = {:.4} ± {:.4}",
        result.v_hom.value, result.v_hom.error, result.m_s.value, result.m_s.error
    );
    let mut dir = RunDir::create(out)?;
    dir.write_with("histogram_co.csv", |w| c_co.histogram.write_csv(w))?;
    dir.write_with("histogram_cross.csv", |w| c_cross.histogram.write_csv(w))?;
    dir.write_json(
        "hom.json",
        &HomDoc {
            config: &cfg,
            g2,
            hom: &result,
            co: correlation_doc(&cfg, co, p_co, &c_co),
            cross: correlation_doc(&cfg, cross, p_cross, &c_cross),
        },
    )?;
    dir.finish("hom", &source)?;
    Ok(())
}

#[derive(Serialize)]
struct FitDoc<'a> {
    data_file: String,
    points: usize,
    fixed: &'a [(String, f64)],
    initial_guess: &'a [f64],
    result: &'a FitResult,
}

fn fit_data(data: &Path, model: Model, guess: Vec<f64>, fix: &[(String, f64)], out: &Path) -> CmdResult {
    let names = model.parameter_names();
    if guess.len() != names.len() {
        return Err(Error::Config(format!("--guess needs {} values ({})", names.len(), names.join(","))).into());
    }
    let file = std::fs::File::open(data).map_err(|source| {
        Failure::input(Error::Io {
            path: data.to_path_buf(),
            source,
        })
    })?;
    let points = read_csv(std::io::BufReader::new(file)).map_err(Failure::input)?;
    let n = points.len();
    let mut problem = FitProblem::new(model, points, guess.clone());
    for (name, value) in fix {
        if !model.parameter_names().contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "--fix {name}: unknown parameter (expected one of {:?})",
                model.parameter_names()
            ))
            .into());
        }
        problem = problem.pin(name, *value);
    }
    let result = fit(&problem)?;
    for (i, name) in result.names.iter().enumerate() {
        println!("{name:<10} {:>14.6e} ± {:.3e}", result.parameters[i], result.errors[i]);
    }
    println!(
        "χ²/dof = {:.4}, {} iterations{}",
        result.reduced_chi2,
        result.iterations,
        if result.degenerate { ", degenerate" } else { "" }
    );
    if !result.converged {
        eprintln!("warning: fit hit the iteration cap");
    }
    let mut dir = RunDir::create(out)?;
    dir.write_json(
        "fit.json",
        &FitDoc {
            data_file: data.display().to_string(),
            points: n,
            fixed: fix,
            initial_guess: &guess,
            result: &result,
        },
    )?;
    dir.finish("fit", &data.display().to_string())?;
    Ok(())
}

fn report(config: &ConfigArg, pulses: Option<u64>, seed: Option<u64>, out: &Path) -> CmdResult {
    let (mut cfg, source) = load_config(config.config.as_deref())?;
    if let Some(p) = pulses {
        cfg.simulation.pulses = p;
    }
    if let Some(s) = seed {
        cfg.simulation.seed = s;
    }
    cfg.validate()?;
    let mut dir = RunDir::create(out)?;
    let report = pipeline::report(&cfg, cfg.simulation.pulses, cfg.simulation.seed, out)?;
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(report.render_table().as_bytes());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut names: Vec<String> = std::fs::read_dir(out)
        .map_err(|source| Error::Io {
            path: out.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != "manifest.json")
        .collect();
    names.sort();
    for n in &names {
        dir.path(n);
    }
    dir.finish("report", &source)?;
    Ok(())
}
