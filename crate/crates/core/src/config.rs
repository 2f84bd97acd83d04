//! Run configuration in TOML.
//!
//! Every section and field is optional; omitted values take the defaults of
//! the corresponding model type. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chain::{ChainModel, EmitterModel};
use crate::error::{Error, Result};
use crate::montecarlo::{MeasurementSetup, Polarization, SetupKind, SimRun};
use crate::phasematch::{DispersionModel, PhaseMatchSpec};
use crate::units;

/// The calibrated preset shipped with the repository.
pub const PRESET_CFG: &str = include_str!("../../../paper.cfg");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub emitter: EmitterModel,
    pub phasematch: PhaseMatchConfig,
    pub dispersion: DispersionModel,
    pub chain: ChainModel,
    pub setup: MeasurementSetup,
    pub analysis: AnalysisConfig,
    pub simulation: SimulationConfig,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseMatchConfig {
    #[serde(deserialize_with = "units::nm")]
    pub signal: f64,
    #[serde(deserialize_with = "units::nm")]
    pub pump: f64,
    #[serde(deserialize_with = "units::celsius")]
    pub temperature: f64,
    #[serde(deserialize_with = "units::um")]
    pub poling_period: f64,
    #[serde(deserialize_with = "units::cm")]
    pub crystal_length: f64,
    pub qpm_order: i32,
    /// Solve the dispersion confinement term so `poling_period` phase-matches
    /// this operating point.
    pub calibrate: bool,
}

impl Default for PhaseMatchConfig {
    fn default() -> Self {
        Self {
            signal: 925.0,
            pump: 2272.44,
            temperature: 43.4,
            poling_period: 25.45,
            crystal_length: 4.0,
            qpm_order: 1,
            calibrate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    #[serde(deserialize_with = "units::ps")]
    pub bin_width: f64,
    #[serde(deserialize_with = "units::ps")]
    pub range: f64,
    /// Peak window half-width.
    #[serde(deserialize_with = "units::ps")]
    pub window: f64,
    /// Peak spacing; the emitter period when absent.
    #[serde(deserialize_with = "optional_ps", skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
}

fn optional_ps<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    units::ps(d).map(Some)
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bin_width: 100.0,
            range: 200_000.0,
            window: 3_000.0,
            period: None,
        }
    }
}

impl AnalysisConfig {
    /// Bin width and range as integer picoseconds.
    pub fn histogram_params(&self) -> Result<(u64, u64)> {
        let as_ps = |name: &str, v: f64| {
            if v > 0.0 && v.fract() == 0.0 && v < 1e15 {
                Ok(v as u64)
            } else {
                Err(Error::Config(format!("analysis.{name} must be a positive whole number of ps, got {v}")))
            }
        };
        let (bw, range) = (as_ps("bin_width", self.bin_width)?, as_ps("range", self.range)?);
        if range % bw != 0 {
            return Err(Error::Config(format!("analysis.bin_width {bw} ps does not divide range {range} ps")));
        }
        Ok((bw, range))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Detectors on the source fiber.
    Nir,
    /// Detectors after the full conversion chain.
    Telecom,
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nir" => Ok(Arm::Nir),
            "telecom" | "tel" => Ok(Arm::Telecom),
            other => Err(Error::Config(format!("unknown arm `{other}` (nir, telecom)"))),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Nir => "nir",
            Arm::Telecom => "telecom",
        })
    }
}

/// Measurement configurations used by the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetupChoice {
    Hbt,
    HomCo,
    HomCross,
}

impl SetupChoice {
    pub const ALL: [SetupChoice; 3] = [SetupChoice::Hbt, SetupChoice::HomCo, SetupChoice::HomCross];
}

impl FromStr for SetupChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hbt" => Ok(Self::Hbt),
            "hom-co" => Ok(Self::HomCo),
            "hom-cross" => Ok(Self::HomCross),
            other => Err(Error::Config(format!("unknown setup `{other}` (hbt, hom-co, hom-cross)"))),
        }
    }
}

impl fmt::Display for SetupChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hbt => "hbt",
            Self::HomCo => "hom-co",
            Self::HomCross => "hom-cross",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub pulses: u64,
    pub seed: u64,
    pub arm: Arm,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            pulses: 50_000_000,
            seed: 1,
            arm: Arm::Nir,
        }
    }
}

/// Synthetic pump-power sweep for the efficiency fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub points: usize,
    #[serde(deserialize_with = "units::watt")]
    pub min_power: f64,
    #[serde(deserialize_with = "units::watt")]
    pub max_power: f64,
    /// Relative Gaussian noise on each efficiency sample.
    pub noise: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            points: 20,
            min_power: 0.02,
            max_power: 0.4,
            noise: 0.03,
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn preset() -> Self {
        Self::parse(PRESET_CFG).expect("shipped preset parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks every section before anything runs.
    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("[{section}] {e}")));
        wrap("emitter", self.emitter.validate())?;
        wrap("chain", self.chain.validate())?;
        wrap("setup", self.setup.validate())?;
        self.analysis.histogram_params()?;
        let a = &self.analysis;
        let period = self.period_ps();
        if !(a.window > 0.0 && a.window < period / 2.0) {
            return Err(Error::Config(format!(
                "analysis.window {} ps must lie in (0, period/2 = {} ps)",
                a.window,
                period / 2.0
            )));
        }
        if !(period < a.range) {
            return Err(Error::Config(format!("analysis.range {} ps is shorter than the period", a.range)));
        }
        if self.simulation.pulses == 0 {
            return Err(Error::Config("[simulation] pulses must be at least 1".into()));
        }
        if self.fit.points < 4|| !(self.fit.noise >= 0.0) || !(self.fit.min_power < self.fit.max_power) {
            return Err(Error::Config("[fit] needs ≥ 4 points, noise ≥ 0 and min_power < max_power".into()));
        }
        wrap("phasematch", self.phasematch_spec().map(|_| ()))?;
        Ok(())
    }

    /// Analysis peak period, ps.
    pub fn period_ps(&self) -> f64 {
        self.analysis.period.unwrap_or_else(|| self.emitter.period_ps())
    }

    pub fn phasematch_spec(&self) -> Result<PhaseMatchSpec> {
        let p = &self.phasematch;
        let mut spec = PhaseMatchSpec::new(p.signal, p.pump, p.poling_period, p.temperature, p.crystal_length)?;
        spec.qpm_order = p.qpm_order;
        spec.validate()?;
        Ok(spec)
    }

    /// Dispersion model, calibrated to the operating point when requested.
    pub fn dispersion_model(&self) -> Result<DispersionModel> {
        let p = &self.phasematch;
        if p.calibrate {
            self.dispersion.calibrated(p.signal, p.pump, p.temperature, p.poling_period)
        } else {
            Ok(self.dispersion)
        }
    }

    pub fn measurement_setup(&self, choice: SetupChoice) -> MeasurementSetup {
        let (kind, polarization) = match choice {
            SetupChoice::Hbt => (SetupKind::Hbt, self.setup.polarization),
            SetupChoice::HomCo => (SetupKind::Umzi, Polarization::Co),
            SetupChoice::HomCross => (SetupKind::Umzi, Polarization::Cross),
        };
        MeasurementSetup {
            kind,
            polarization,
            ..self.setup
        }
    }

    pub fn sim_run(&self, choice: SetupChoice, arm: Arm, pulses: u64, seed: u64) -> SimRun {
        SimRun {
            seed,
            n_pulses: pulses,
            emitter: self.emitter,
            chain: (arm == Arm::Telecom).then(|| self.chain.clone()),
            setup: self.measurement_setup(choice),
        }
    }

    /// Resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::StageKind;

    #[test]
    fn preset_matches_built_in_chain() {
        let cfg = RunConfig::preset();
        assert_eq!(cfg.chain.stages.len(), ChainModel::default().stages.len());
        for (a, b) in cfg.chain.stages.iter().zip(&ChainModel::default().stages) {
            assert_eq!(a.name, b.name);
            match (a.kind, b.kind) {
                (StageKind::Filter { transmission: x, .. }, StageKind::Filter { transmission: y, .. }) => {
                    assert!((x - y).abs() < 1e-12)
                }
                (x, y) => assert_eq!(x, y),
            }
        }
        assert_eq!(cfg.analysis.window, 6_500.0);
        assert_eq!(cfg.setup.detectors[1].dead_time, 10_000.0);
        assert!((cfg.chain.pump_power - 0.285).abs() < 1e-15);
    }

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[emitter]\nbrigthness = 0.1\n"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[nonsense]\n").is_err());
        assert!(RunConfig::parse("[[chain.stage]]\nname='x'\nkind='loss'\ntransmission=0.5\ncolour=1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[emitter]\nbrightness = 1.5\n").is_err());
        assert!(RunConfig::parse("[analysis]\nwindow = \"7 ns\"\n").is_err());
        assert!(RunConfig::parse("[analysis]\nbin_width = \"300 ps\"\n").is_err());
        assert!(RunConfig::parse("[emitter]\nlambda = \"3 mW\"\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::preset();
        let again = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/qfc.cfg")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/qfc.cfg"));
        assert_eq!(err.kind(), crate::ErrorKind::Config);
    }
}
