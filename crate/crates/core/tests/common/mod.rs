#![allow(dead_code)]

use qfc_core::chain::EmitterModel;
use qfc_core::config::RunConfig;
use qfc_core::correlator::G2Result;
use qfc_core::montecarlo::{analytic_histogram, MeasurementSetup, Polarization, SimRun};
use qfc_core::pipeline::simulate_and_correlate;

/// All-pairs reference for the sweep correlator.
pub fn brute_force(a: &[u64], b: &[u64], bin_width: u64, range: u64) -> Vec<u64> {
    let mut bins = vec![0u64; (2 * range / bin_width) as usize];
    for &ta in a {
        for &tb in b {
            let shifted = tb as i64 - ta as i64 + range as i64;
            if (0..2 * range as i64).contains(&shifted) {
                bins[shifted as usize / bin_width as usize] += 1;
            }
        }
    }
    bins
}

/// Bin counts through the public CSV writer.
pub fn bins_of(h: &qfc_core::correlator::CoincidenceHistogram) -> Vec<u64> {
    let mut csv = Vec::new();
    h.write_csv(&mut csv).unwrap();
    String::from_utf8(csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

pub fn run(emitter: EmitterModel, setup: MeasurementSetup, pulses: u64, seed: u64) -> SimRun {
    SimRun {
        seed,
        n_pulses: pulses,
        emitter,
        chain: None,
        setup,
    }
}

/// One cell of the Monte Carlo versus enumeration comparison.
#[derive(Debug)]
pub struct OracleCheck {
    pub label: String,
    pub simulated: f64,
    pub error: f64,
    pub expected: f64,
}

impl OracleCheck {
    pub fn pulls(&self) -> f64 {
        (self.simulated - self.expected).abs() / self.error
    }
}

fn compare(label: String, run: &SimRun, cfg: &RunConfig) -> OracleCheck {
    let (_, corr) = simulate_and_correlate(run, &cfg.analysis, cfg.period_ps()).unwrap();
    let G2Result { g2, side_peaks, .. } = corr.g2;
    let oracle = analytic_histogram(run, cfg.analysis.window).unwrap();
    OracleCheck {
        label,
        simulated: g2.value,
        error: g2.error,
        expected: oracle.g2((side_peaks / 2) as i64),
    }
}

/// HBT and co-polarized UMZI zero-delay ratios over a 3×3 grid of (g², M),
/// with the detectors and analysis of the shipped configuration.
pub fn oracle_grid(pulses: u64) -> Vec<OracleCheck> {
    let cfg = RunConfig::preset();
    let mut out = Vec::new();
    let mut seed = 100;
    for &g2 in &[0.02, 0.05, 0.10] {
        for &m in &[0.3, 0.6, 0.9] {
            let emitter = EmitterModel {
                g2_target: g2,
                overlap: m,
                ..cfg.emitter
            };
            let hbt = MeasurementSetup {
                kind: qfc_core::montecarlo::SetupKind::Hbt,
                ..cfg.setup
            };
            let co = MeasurementSetup {
                kind: qfc_core::montecarlo::SetupKind::Umzi,
                polarization: Polarization::Co,
                ..cfg.setup
            };
            seed += 1;
            out.push(compare(format!("hbt g2={g2} M={m}"), &run(emitter, hbt, pulses, seed), &cfg));
            seed += 1;
            out.push(compare(format!("umzi g2={g2} M={m}"), &run(emitter, co, pulses, seed), &cfg));
        }
    }
    out
}
