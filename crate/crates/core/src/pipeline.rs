//! End-to-end orchestration shared by the command line and the test suites.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::chain::{optimal_pump_power, predict_rates, predict_snr, RateCascade, StageKind};
use crate::config::{AnalysisConfig, Arm, RunConfig, SetupChoice};
use crate::correlator::{
    g2_zero, integrate_peaks, snr_from_counts, CoincidenceHistogram, G2Result, HomResult, PeakAreas,
    StreamingCorrelator,
};
use crate::error::{Error, Result};
use crate::fitting::{fit, DataPoint, FitProblem, FitResult, Model};
use crate::montecarlo::{simulate, SimRun, SimSummary, TagSink};
use crate::phasematch::{
    conversion_spectrum, solve_poling_period, solve_temperature, DispersionModel, PhaseMatchSpec, TuningAxis,
    TuningCurve,
};
use crate::tagstore::{write_sidecar, ReadOptions, TagFileHeader, TagReader, TagWriter};

/// Version string recorded in every output document.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default half-span of a tuning scan around the operating point.
pub fn default_span(axis: TuningAxis) -> f64 {
    match axis {
        TuningAxis::Temperature => 3.0,
        TuningAxis::SignalWavelength => 1.5,
        TuningAxis::PumpWavelength => 5.0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseMatchOutput {
    pub axis: TuningAxis,
    /// Signal wavelength of the operating point, nm.
    pub signal: f64,
    pub range: (f64, f64),
    /// Phase-matching temperature for the configured period, °C.
    pub temperature: f64,
    /// Phase-matching period at the configured temperature, µm.
    pub poling_period: f64,
    /// Same, with the uncalibrated bulk model.
    pub bulk_poling_period: f64,
    pub confinement: f64,
    #[serde(flatten)]
    pub curve: TuningCurve,
}

/// Tuning curve around the operating point, with the signal moved to `signal` if given.
///
/// For a moved signal the crystal is first re-tuned to the temperature that
/// phase-matches it, as done experimentally.
pub fn phasematch_curve(
    cfg: &RunConfig,
    axis: TuningAxis,
    signal: Option<f64>,
    range: Option<(f64, f64)>,
    samples: usize,
) -> Result<PhaseMatchOutput> {
    let model = cfg.dispersion_model()?;
    let base = cfg.phasematch_spec()?;
    let signal = signal.unwrap_or(base.lambda_sig);
    let temperature = solve_temperature(signal, base.lambda_pump, base.poling_period, &model)?;
    let mut spec = PhaseMatchSpec::new(signal, base.lambda_pump, base.poling_period, temperature, base.crystal_length)?;
    spec.qpm_order = base.qpm_order;
    let poling_period = solve_poling_period(signal, base.lambda_pump, temperature, &model)?;
    let bulk = DispersionModel {
        confinement: 0.0,
        ..model
    };
    let bulk_poling_period = solve_poling_period(signal, base.lambda_pump, temperature, &bulk)?;
    let center = match axis {
        TuningAxis::Temperature => temperature,
        TuningAxis::SignalWavelength => signal,
        TuningAxis::PumpWavelength => base.lambda_pump,
    };
    let range = range.unwrap_or((center - default_span(axis), center + default_span(axis)));
    let curve = conversion_spectrum(&spec, &model, axis, range, samples)?;
    Ok(PhaseMatchOutput {
        axis,
        signal,
        range,
        temperature,
        poling_period,
        bulk_poling_period,
        confinement: model.confinement,
        curve,
    })
}

/// Peak analysis of one histogram.
#[derive(Debug, Clone, Serialize)]
pub struct Correlation {
    pub histogram: CoincidenceHistogram,
    pub peaks: PeakAreas,
    pub g2: G2Result,
    pub warnings: Vec<String>,
}

pub fn analyze(histogram: CoincidenceHistogram, period: f64, window: f64) -> Result<Correlation> {
    let peaks = integrate_peaks(&histogram, period, window)?;
    let g2 = g2_zero(&peaks)?;
    let warnings = peaks.warnings.clone();
    Ok(Correlation {
        histogram,
        peaks,
        g2,
        warnings,
    })
}

pub fn correlator_for(analysis: &AnalysisConfig) -> Result<StreamingCorrelator> {
    let (bw, range) = analysis.histogram_params()?;
    StreamingCorrelator::new(0, 1, bw, range)
}

/// Streams a tag file through the correlator.
pub fn correlate_file(path: &Path, analysis: &AnalysisConfig, period: f64) -> Result<Correlation> {
    let mut corr = correlator_for(analysis)?;
    let reader = TagReader::open(
        path,
        ReadOptions {
            channel: None,
            validate: true,
        },
    )?;
    for tag in reader {
        corr.push(tag?)?;
    }
    analyze(corr.finish(), period, analysis.window)
}

/// Simulates straight into the correlator without touching disk.
pub fn simulate_and_correlate(run: &SimRun, analysis: &AnalysisConfig, period: f64) -> Result<(SimSummary, Correlation)> {
    let mut corr = correlator_for(analysis)?;
    let summary = simulate(run, &mut corr)?;
    Ok((summary, analyze(corr.finish(), period, analysis.window)?))
}

/// Metadata written next to every simulated tag file.
#[derive(Debug, Clone, Serialize)]
pub struct SimMetadata<'a> {
    pub version: &'static str,
    pub setup: SetupChoice,
    pub arm: Arm,
    pub run: &'a SimRun,
    pub summary: &'a SimSummary,
}

pub fn simulate_to_file(run: &SimRun, setup: SetupChoice, arm: Arm, path: &Path) -> Result<SimSummary> {
    let mut writer = TagWriter::create(path, TagFileHeader::new(2))?;
    let summary = simulate(run, &mut writer)?;
    writer.finish()?;
    write_sidecar(
        path,
        &SimMetadata {
            version: VERSION,
            setup,
            arm,
            run,
            summary: &summary,
        },
    )?;
    Ok(summary)
}

/// Synthetic efficiency-vs-pump sweep from the chain with relative Gaussian noise.
pub fn efficiency_sweep(cfg: &RunConfig) -> Result<Vec<DataPoint>> {
    let f = &cfg.fit;
    let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
    let mut out = Vec::with_capacity(f.points);
    for i in 0..f.points {
        let p = f.min_power + (f.max_power - f.min_power) * i as f64 / (f.points - 1) as f64;
        let truth = cfg.chain.with_pump_power(p).transmission()?;
        let noise: f64 = StandardNormal.sample(&mut rng);
        let sigma = (f.noise * truth).max(1e-6);
        out.push(DataPoint {
            x: p,
            y: truth + sigma * noise,
            sigma,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyFit {
    pub fit: FitResult,
    pub eta_max: (f64, f64),
    pub eta_n: (f64, f64),
    /// First conversion maximum, W.
    pub optimal_pump_power: (f64, f64),
}

/// Fits η_max·sin²(L√(η_n P)) with the crystal length pinned to `length_cm`.
pub fn fit_efficiency(data: &[DataPoint], length_cm: f64) -> Result<EfficiencyFit> {
    let peak = data
        .iter()
        .max_by(|a, b| a.y.total_cmp(&b.y))
        .ok_or_else(|| Error::Invalid("no data".into()))?;
    // Start as if the largest sample sat at the first maximum.
    let eta_n_guess = optimal_pump_power(1.0, length_cm)? / peak.x.max(1e-6);
    let problem = FitProblem::new(Model::Sin2SqrtPower, data.to_vec(), vec![peak.y, eta_n_guess, length_cm])
        .pin("length", length_cm);
    let result = fit(&problem)?;
    let eta_max = result.parameter("eta_max").expect("model parameter");
    let eta_n = result.parameter("eta_n").expect("model parameter");
    let p_star = optimal_pump_power(eta_n.0, length_cm)?;
    Ok(EfficiencyFit {
        eta_max,
        eta_n,
        optimal_pump_power: (p_star, p_star * eta_n.1 / eta_n.0),
        fit: result,
    })
}

/// g²(0), V_HOM and M_s of one arm.
#[derive(Debug, Clone, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub g2: G2Result,
    pub hom: HomResult,
    pub simulations: Vec<(SetupChoice, SimSummary)>,
    pub warnings: Vec<String>,
}

/// Seed of one (arm, setup) simulation derived from the base seed.
pub fn derived_seed(base: u64, arm: Arm, setup: SetupChoice) -> u64 {
    let a = match arm {
        Arm::Nir => 0,
        Arm::Telecom => 3,
    };
    let s = match setup {
        SetupChoice::Hbt => 0,
        SetupChoice::HomCo => 1,
        SetupChoice::HomCross => 2,
    };
    base.wrapping_mul(8).wrapping_add(a + s)
}

/// Runs HBT, HOM-co and HOM-cross for one arm. `keep` receives each histogram.
pub fn measure_arm(
    cfg: &RunConfig,
    arm: Arm,
    pulses: u64,
    seed: u64,
    mut keep: impl FnMut(SetupChoice, &CoincidenceHistogram) -> Result<()>,
) -> Result<ArmResult> {
    let period = cfg.period_ps();
    let mut g2 = Vec::new();
    let mut simulations = Vec::new();
    let mut warnings = Vec::new();
    for setup in SetupChoice::ALL {
        let run = cfg.sim_run(setup, arm, pulses, derived_seed(seed, arm, setup));
        let (summary, corr) = simulate_and_correlate(&run, &cfg.analysis, period)?;
        keep(setup, &corr.histogram)?;
        warnings.extend(corr.warnings.iter().map(|w| format!("{arm} {setup}: {w}")));
        g2.push(corr.g2);
        simulations.push((setup, summary));
    }
    let hom = HomResult::from_parts(g2[1].g2, g2[2].g2, g2[0].g2)?;
    Ok(ArmResult {
        arm,
        g2: g2[0].clone(),
        hom,
        simulations,
        warnings,
    })
}

/// Detection rates with the converter on and detuned off phase matching.
#[derive(Debug, Clone, Serialize)]
pub struct SnrMeasurement {
    pub rate_in: f64,
    pub rate_out: f64,
    /// (in − out)/out.
    pub snr: f64,
    /// in/out, the alternative reading of the same measurement.
    pub snr_total_over_noise: f64,
}

/// Simulates the telecom HBT detectors in and out of phase matching and
/// compares the summed click rates.
pub fn measure_snr(cfg: &RunConfig, pulses: u64, seed: u64) -> Result<SnrMeasurement> {
    let rate = |run: &SimRun| -> Result<f64> {
        struct Count;
        impl TagSink for Count {
            fn push(&mut self, _: crate::tagstore::TimeTag) -> Result<()> {
                Ok(())
            }
        }
        let s = simulate(run, &mut Count)?;
        let seconds = run.n_pulses as f64 / run.emitter.rep_rate;
        Ok((s.tags[0] + s.tags[1]) as f64 / seconds)
    };
    let on = cfg.sim_run(SetupChoice::Hbt, Arm::Telecom, pulses, seed);
    let mut off = on.clone();
    off.seed = seed.wrapping_add(1);
    // Out of phase matching the converter passes no signal but the pump still makes noise.
    for stage in &mut off.chain.as_mut().expect("telecom arm has a chain").stages {
        if let StageKind::Converter { eta_max, .. } = &mut stage.kind {
            *eta_max = 0.0;
        }
    }
    let (rate_in, rate_out) = (rate(&on)?, rate(&off)?);
    Ok(SnrMeasurement {
        rate_in,
        rate_out,
        snr: snr_from_counts(rate_in, rate_out)?,
        snr_total_over_noise: if rate_out > 0.0 { rate_in / rate_out } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub quantity: &'static str,
    pub value: f64,
    pub error: f64,
    pub unit: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub version: &'static str,
    pub pulses: u64,
    pub seed: u64,
    pub config: RunConfig,
    pub phasematch: PhaseMatchOutput,
    pub rates: RateCascade,
    pub predicted_snr: f64,
    pub snr: SnrMeasurement,
    pub efficiency: EfficiencyFit,
    pub arms: Vec<ArmResult>,
    pub table: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn render_table(&self) -> String {
        let mut s = String::from("quantity               value        error  unit\n");
        for r in &self.table {
            s.push_str(&format!("{:<20} {:>9.4} {:>12.4}  {}\n", r.quantity, r.value, r.error, r.unit));
        }
        s
    }
}

fn csv_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Full reproduction: phase matching, rate budget, six simulations,
/// correlation analysis and the efficiency fit. Writes intermediate CSVs and
/// `report.json` into `out`.
pub fn report(cfg: &RunConfig, pulses: u64, seed: u64, out: &Path) -> Result<Report> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();

    let pm = phasematch_curve(cfg, TuningAxis::Temperature, None, None, 601).map_err(|e| e.in_stage("phasematch"))?;
    let path = csv_path(out, "phasematch_temperature.csv");
    pm.curve.write_csv(create(&path)?).map_err(|e| Error::io(&path, e))?;
    files.push(path);

    let rates = predict_rates(&cfg.chain, &cfg.emitter).map_err(|e| e.in_stage("chain"))?;
    let predicted_snr = predict_snr(&cfg.chain, &cfg.emitter).map_err(|e| e.in_stage("chain"))?;

    let mut arms = Vec::new();
    let mut warnings = pm.curve.warnings.clone();
    for arm in [Arm::Nir, Arm::Telecom] {
        let result = measure_arm(cfg, arm, pulses, seed, |setup, hist| {
            let path = csv_path(out, &format!("histogram_{arm}_{setup}.csv"));
            hist.write_csv(create(&path)?).map_err(|e| Error::io(&path, e))?;
            Ok(())
        })
        .map_err(|e| e.in_stage("simulate"))?;
        warnings.extend(result.warnings.clone());
        arms.push(result);
    }
    let snr = measure_snr(cfg, pulses, seed.wrapping_add(1000)).map_err(|e| e.in_stage("snr"))?;

    let sweep = efficiency_sweep(cfg).map_err(|e| e.in_stage("fit"))?;
    let length = cfg
        .chain
        .converter()
        .map(|c| c.2)
        .ok_or_else(|| Error::Invalid("chain has no converter".into()).in_stage("fit"))?;
    let efficiency = fit_efficiency(&sweep, length).map_err(|e| e.in_stage("fit"))?;
    if !efficiency.fit.converged {
        warnings.push("efficiency fit hit the iteration cap".into());
    }
    let path = csv_path(out, "efficiency_sweep.csv");
    crate::fitting::write_csv(&sweep, create(&path)?).map_err(|e| Error::io(&path, e))?;
    let path = csv_path(out, "efficiency_fit.csv");
    {
        use std::io::Write;
        let mut w = create(&path)?;
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(w, "pump_power_w,efficiency,band")?;
            for i in 0..=200 {
                let p = cfg.fit.max_power * i as f64 / 200.0;
                writeln!(w, "{p},{},{}", efficiency.fit.eval(p), efficiency.fit.band(p))?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| Error::io(&path, e))?;
    }

    let row = |quantity, (value, error): (f64, f64), unit| SummaryRow {
        quantity,
        value,
        error,
        unit,
    };
    let (nir, tel) = (&arms[0], &arms[1]);
    let table = vec![
        row("eta_ext_max", efficiency.eta_max, ""),
        row("optimal_pump_power", (efficiency.optimal_pump_power.0 * 1e3, efficiency.optimal_pump_power.1 * 1e3), "mW"),
        row("input_rate", (rates.input * 1e-6, 0.0), "MHz"),
        row("output_rate", (rates.output * 1e-6, 0.0), "MHz"),
        row("snr", (snr.snr, 0.0), ""),
        row("g2_nir", (nir.g2.g2.value, nir.g2.g2.error), ""),
        row("g2_telecom", (tel.g2.g2.value, tel.g2.g2.error), ""),
        row("v_hom_nir", (nir.hom.v_hom.value, nir.hom.v_hom.error), ""),
        row("v_hom_telecom", (tel.hom.v_hom.value, tel.hom.v_hom.error), ""),
        row("m_s_nir", (nir.hom.m_s.value, nir.hom.m_s.error), ""),
        row("m_s_telecom", (tel.hom.m_s.value, tel.hom.m_s.error), ""),
        row("signal_fwhm_t", (pm.curve.fwhm.unwrap_or(f64::NAN), 0.0), "°C"),
        row("phase_match_t", (pm.temperature, 0.0), "°C"),
    ];
    let report = Report {
        version: VERSION,
        pulses,
        seed,
        config: cfg.clone(),
        phasematch: pm,
        rates,
        predicted_snr,
        snr,
        efficiency,
        arms,
        table,
        warnings,
    };
    let path = out.join("report.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    std::fs::write(out.join("summary.txt"), report.render_table()).map_err(|e| Error::io(out.join("summary.txt"), e))?;
    Ok(report)
}
