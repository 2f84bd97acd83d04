//! Photon budget of the conversion interface.
//!
//! Rates are in Hz, pump powers in W, crystal lengths in cm and the
//! normalized efficiency η_n in W⁻¹·cm⁻².

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units;

/// Pulsed single-photon source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmitterModel {
    #[serde(deserialize_with = "units::hz")]
    pub rep_rate: f64,
    /// Probability per pulse of at least one fiber-coupled photon.
    pub brightness: f64,
    /// Source g²(0).
    #[serde(rename = "g2")]
    pub g2_target: f64,
    /// Pairwise two-photon overlap of consecutively emitted photons.
    pub overlap: f64,
    #[serde(deserialize_with = "units::nm")]
    pub lambda: f64,
}

impl Default for EmitterModel {
    fn default() -> Self {
        Self {
            rep_rate: 76e6,
            brightness: 0.037,
            g2_target: 0.044,
            overlap: 0.717,
            lambda: 925.7,
        }
    }
}

impl EmitterModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.rep_rate > 0.0 && self.rep_rate.is_finite()) {
            return Err(Error::Invalid(format!("rep_rate must be positive, got {}", self.rep_rate)));
        }
        if !(self.brightness > 0.0 && self.brightness <= 1.0) {
            return Err(Error::Invalid(format!(
                "brightness must lie in (0, 1], got {}",
                self.brightness
            )));
        }
        if !(0.0..1.0).contains(&self.g2_target) {
            return Err(Error::Invalid(format!("g2 must lie in [0, 1), got {}", self.g2_target)));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Invalid(format!("overlap must lie in [0, 1], got {}", self.overlap)));
        }
        Ok(())
    }

    /// Pulse spacing in ps.
    pub fn period_ps(&self) -> f64 {
        1e12 / self.rep_rate
    }

    /// In-fiber single-photon rate, Hz.
    pub fn input_rate(&self) -> f64 {
        self.rep_rate * self.brightness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageKind {
    Loss {
        #[serde(deserialize_with = "units::transmission")]
        transmission: f64,
    },
    Converter {
        eta_max: f64,
        /// W⁻¹·cm⁻².
        eta_n: f64,
        #[serde(deserialize_with = "units::cm")]
        length: f64,
    },
    NoiseSource {
        #[serde(deserialize_with = "units::hz_per_mw", default)]
        rate_per_mw: f64,
        #[serde(deserialize_with = "units::hz", default)]
        pedestal: f64,
    },
    Filter {
        #[serde(deserialize_with = "units::transmission")]
        transmission: f64,
        /// Suppression of the noise channel, dB.
        #[serde(deserialize_with = "units::decibel")]
        extinction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    #[serde(flatten)]
    pub kind: StageKind,
}

impl Stage {
    pub fn new(name: impl Into<String>, kind: StageKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Invalid(format!("stage `{}`: {what}", self.name)));
        match self.kind {
            StageKind::Loss { transmission } | StageKind::Filter { transmission, .. }
                if !(0.0..=1.0).contains(&transmission) =>
            {
                bad(format!("transmission {transmission} outside [0, 1]"))
            }
            StageKind::Filter { extinction, .. } if !(extinction >= 0.0) => {
                bad(format!("extinction {extinction} dB is negative"))
            }
            StageKind::Converter {
                eta_max,
                eta_n,
                length,
            } if !(0.0..=1.0).contains(&eta_max) || !(eta_n >= 0.0) || !(length >= 0.0) => {
                bad(format!("converter parameters out of range ({eta_max}, {eta_n}, {length})"))
            }
            StageKind::NoiseSource {
                rate_per_mw,
                pedestal,
            } if !(rate_per_mw >= 0.0 && pedestal >= 0.0) => bad("negative noise rate".into()),
            _ => Ok(()),
        }
    }
}

/// Ordered stages between the source fiber and the output detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainModel {
    #[serde(rename = "stage")]
    pub stages: Vec<Stage>,
    #[serde(deserialize_with = "units::watt")]
    pub pump_power: f64,
}

impl Default for ChainModel {
    /// The calibrated interface: fiber-to-waveguide coupling, PPLN converter,
    /// pump-induced noise, spectral filtering and output fiber coupling.
    fn default() -> Self {
        Self {
            stages: vec![
                Stage::new("input_coupling", StageKind::Loss { transmission: 0.88 }),
                Stage::new(
                    "ppln",
                    StageKind::Converter {
                        eta_max: 0.67,
                        eta_n: 0.5411,
                        length: 4.0,
                    },
                ),
                Stage::new(
                    "raman",
                    StageKind::NoiseSource {
                        rate_per_mw: 5e3,
                        pedestal: 0.0,
                    },
                ),
                Stage::new(
                    "pump_leakage",
                    StageKind::NoiseSource {
                        rate_per_mw: 0.0,
                        pedestal: 1.8e6,
                    },
                ),
                Stage::new(
                    "filter",
                    StageKind::Filter {
                        transmission: units::db_to_transmission(-0.8),
                        extinction: 30.0,
                    },
                ),
                Stage::new("output_coupling", StageKind::Loss { transmission: 0.98684 }),
            ],
            pump_power: 0.285,
        }
    }
}

impl ChainModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.pump_power >= 0.0) {
            return Err(Error::Invalid(format!(
                "pump power must be non-negative, got {} W",
                self.pump_power
            )));
        }
        let converters = self
            .stages
            .iter()
            .filter(|s| matches!(s.kind, StageKind::Converter { .. }))
            .count();
        if converters != 1 {
            return Err(Error::Invalid(format!(
                "chain needs exactly one converter stage, found {converters}"
            )));
        }
        self.stages.iter().try_for_each(Stage::validate)
    }

    pub fn with_pump_power(&self, pump_power: f64) -> Self {
        Self {
            pump_power,
            ..self.clone()
        }
    }

    /// (eta_max, eta_n, length) of the converter stage.
    pub fn converter(&self) -> Option<(f64, f64, f64)> {
        self.stages.iter().find_map(|s| match s.kind {
            StageKind::Converter {
                eta_max,
                eta_n,
                length,
            } => Some((eta_max, eta_n, length)),
            _ => None,
        })
    }

    /// Signal transmission of one stage at the chain's pump power.
    fn stage_transmission(&self, kind: &StageKind) -> Result<f64> {
        match *kind {
            StageKind::Loss { transmission } | StageKind::Filter { transmission, .. } => {
                Ok(transmission)
            }
            StageKind::Converter {
                eta_max,
                eta_n,
                length,
            } => converter_efficiency(self.pump_power, eta_max, eta_n, length),
            StageKind::NoiseSource { .. } => Ok(1.0),
        }
    }

    /// End-to-end signal transmission (external efficiency) at the chain's pump power.
    pub fn transmission(&self) -> Result<f64> {
        self.stages
            .iter()
            .try_fold(1.0, |t, s| Ok(t * self.stage_transmission(&s.kind)?))
    }
}

/// η(P) = η_max·sin²(L·√(η_n·P)). Over-pumping reconverts; the oscillation is kept.
pub fn converter_efficiency(pump_power: f64, eta_max: f64, eta_n: f64, length_cm: f64) -> Result<f64> {
    if !(pump_power >= 0.0 && eta_max >= 0.0 && eta_n >= 0.0 && length_cm >= 0.0) {
        return Err(Error::Invalid(format!(
            "converter parameters must be non-negative (P={pump_power}, η_max={eta_max}, η_n={eta_n}, L={length_cm})"
        )));
    }
    let s = (length_cm * (eta_n * pump_power).sqrt()).sin();
    Ok(eta_max * s * s)
}

/// First maximum of the conversion curve, P* = (π/2L)²/η_n.
pub fn optimal_pump_power(eta_n: f64, length_cm: f64) -> Result<f64> {
    if !(eta_n > 0.0 && length_cm > 0.0) {
        return Err(Error::Invalid(format!(
            "η_n and L must be positive, got {eta_n} and {length_cm}"
        )));
    }
    let a = FRAC_PI_2 / length_cm;
    Ok(a * a / eta_n)
}

/// η_ext = N_out/N_in.
pub fn external_efficiency(n_in: f64, n_out: f64) -> Result<f64> {
    if n_in == 0.0 {
        return Err(Error::Division("no input photons"));
    }
    if !(n_in > 0.0 && n_out >= 0.0) {
        return Err(Error::Invalid(format!("counts must be non-negative ({n_in}, {n_out})")));
    }
    Ok(n_out / n_in)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRate {
    pub name: String,
    /// Signal rate after the stage, Hz.
    pub signal: f64,
    /// Noise rate after the stage, Hz.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCascade {
    pub input: f64,
    pub stages: Vec<StageRate>,
    pub output: f64,
    pub noise: f64,
    pub efficiency: f64,
}

/// Propagates the emitter rate and generated noise through every stage.
///
/// Loss stages attenuate signal and noise alike; filters pass the signal with
/// their transmission and suppress noise by their extinction.
pub fn predict_rates(chain: &ChainModel, emitter: &EmitterModel) -> Result<RateCascade> {
    chain.validate()?;
    let input = emitter.input_rate();
    let mut signal = input;
    let mut noise = 0.0;
    let mut stages = Vec::with_capacity(chain.stages.len());
    for stage in &chain.stages {
        match stage.kind {
            StageKind::Loss { transmission } => {
                signal *= transmission;
                noise *= transmission;
            }
            StageKind::Filter {
                transmission,
                extinction,
            } => {
                signal *= transmission;
                noise *= units::db_to_transmission(-extinction);
            }
            StageKind::Converter { .. } => signal *= chain.stage_transmission(&stage.kind)?,
            StageKind::NoiseSource {
                rate_per_mw,
                pedestal,
            } => noise += rate_per_mw * chain.pump_power * 1e3 + pedestal,
        }
        stages.push(StageRate {
            name: stage.name.clone(),
            signal,
            noise,
        });
    }
    Ok(RateCascade {
        input,
        stages,
        output: signal,
        noise,
        efficiency: signal / input,
    })
}

/// Output signal rate over output noise rate; `f64::INFINITY` when noise vanishes.
pub fn predict_snr(chain: &ChainModel, emitter: &EmitterModel) -> Result<f64> {
    if !chain
        .stages
        .iter()
        .any(|s| matches!(s.kind, StageKind::NoiseSource { .. }))
    {
        return Err(Error::Invalid("SNR needs at least one noise_source stage".into()));
    }
    let rates = predict_rates(chain, emitter)?;
    if rates.noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(rates.output / rates.noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ETA_N: f64 = 0.5411;

    fn toy_chain(extinction: f64) -> ChainModel {
        ChainModel {
            stages: vec![
                Stage::new("in", StageKind::Loss { transmission: 0.9 }),
                Stage::new(
                    "ppln",
                    StageKind::Converter {
                        eta_max: 0.6,
                        eta_n: ETA_N,
                        length: 4.0,
                    },
                ),
                Stage::new(
                    "raman",
                    StageKind::NoiseSource {
                        rate_per_mw: 100.0,
                        pedestal: 1e4,
                    },
                ),
                Stage::new(
                    "dwdm",
                    StageKind::Filter {
                        transmission: 0.8,
                        extinction,
                    },
                ),
            ],
            pump_power: 0.285,
        }
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(converter_efficiency(0.0, 0.484, ETA_N, 4.0).unwrap(), 0.0);
        let peak = converter_efficiency(0.285, 0.484, ETA_N, 4.0).unwrap();
        assert!((peak - 0.484).abs() < 1e-4, "{peak}");
        let half = converter_efficiency(0.1425, 0.484, ETA_N, 4.0).unwrap();
        let expected = 0.484 * (FRAC_PI_2 * 0.5f64.sqrt()).sin().powi(2);
        assert!((half - expected).abs() < 1e-4 && (half - 0.389).abs() < 1e-3, "{half}");
        assert!(converter_efficiency(-1.0, 0.484, ETA_N, 4.0).is_err());
    }

    #[test]
    fn optimal_power_examples() {
        let p = optimal_pump_power(ETA_N, 4.0).unwrap();
        assert!((p - 0.285).abs() < 1e-4, "{p}");
        let eta = converter_efficiency(p, 0.484, ETA_N, 4.0).unwrap();
        assert!((eta - 0.484).abs() < 1e-15);
        let p8 = optimal_pump_power(ETA_N, 8.0).unwrap();
        assert!((p8 * 4.0 - p).abs() < 1e-15);
        assert!(optimal_pump_power(0.0, 4.0).is_err());
    }

    #[test]
    fn efficiency_is_periodic_in_sqrt_power() {
        // sin² has period π in its argument: √P advances by π/(L√η_n).
        for &p in &[0.05f64, 0.2, 0.285, 0.4] {
            let shift = std::f64::consts::PI / (4.0 * ETA_N.sqrt());
            let p2 = (p.sqrt() + shift).powi(2);
            let a = converter_efficiency(p, 0.5, ETA_N, 4.0).unwrap();
            let b = converter_efficiency(p2, 0.5, ETA_N, 4.0).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn external_efficiency_examples() {
        let e = external_efficiency(2.8e6, 1.3e6).unwrap();
        assert!((e - 0.464).abs() < 5e-4, "{e}");
        assert_eq!(external_efficiency(7.0, 7.0).unwrap(), 1.0);
        assert_eq!(external_efficiency(7.0, 0.0).unwrap(), 0.0);
        assert!(matches!(external_efficiency(0.0, 1.0), Err(Error::Division(_))));
    }

    #[test]
    fn input_rate_from_brightness() {
        let e = EmitterModel::default();
        assert!((e.input_rate() - 2.812e6).abs() < 1.0);
    }

    #[test]
    fn single_loss_halves_rate() {
        let chain = ChainModel {
            stages: vec![
                Stage::new("half", StageKind::Loss { transmission: 0.5 }),
                Stage::new(
                    "ppln",
                    StageKind::Converter {
                        eta_max: 1.0,
                        eta_n: ETA_N,
                        length: 4.0,
                    },
                ),
            ],
            pump_power: optimal_pump_power(ETA_N, 4.0).unwrap(),
        };
        let r = predict_rates(&chain, &EmitterModel::default()).unwrap();
        assert!((r.output - r.input / 2.0).abs() < 1e-6);
    }

    #[test]
    fn chain_needs_one_converter() {
        let mut chain = toy_chain(30.0);
        chain.stages.remove(1);
        assert!(chain.validate().is_err());
        let mut twice = toy_chain(30.0);
        twice.stages.push(twice.stages[1].clone());
        assert!(twice.validate().is_err());
    }

    #[test]
    fn snr_examples() {
        let mut chain = toy_chain(30.0);
        chain.pump_power = 0.0;
        if let StageKind::NoiseSource { pedestal, .. } = &mut chain.stages[2].kind {
            *pedestal = 0.0;
        }
        assert_eq!(predict_snr(&chain, &EmitterModel::default()).unwrap(), f64::INFINITY);

        // 1.3 MHz over 3.25 kHz.
        let fixed = ChainModel {
            stages: vec![
                Stage::new(
                    "ppln",
                    StageKind::Converter {
                        eta_max: 1.3e6 / EmitterModel::default().input_rate(),
                        eta_n: ETA_N,
                        length: 4.0,
                    },
                ),
                Stage::new(
                    "noise",
                    StageKind::NoiseSource {
                        rate_per_mw: 0.0,
                        pedestal: 3.25e3,
                    },
                ),
            ],
            pump_power: optimal_pump_power(ETA_N, 4.0).unwrap(),
        };
        let snr = predict_snr(&fixed, &EmitterModel::default()).unwrap();
        assert!((snr - 400.0).abs() < 1e-6, "{snr}");

        let mut quiet = toy_chain(30.0);
        quiet.stages.remove(2);
        assert!(predict_snr(&quiet, &EmitterModel::default()).is_err());
    }

    #[test]
    fn snr_grows_with_extinction() {
        let e = EmitterModel::default();
        let mut last = 0.0;
        for ext in [0.0, 5.0, 10.0, 20.0, 40.0] {
            let snr = predict_snr(&toy_chain(ext), &e).unwrap();
            assert!(snr >= last);
            last = snr;
        }
    }

    #[test]
    fn rates_are_linear_in_brightness() {
        let chain = toy_chain(30.0);
        let mut e = EmitterModel::default();
        let a = predict_rates(&chain, &e).unwrap();
        e.brightness *= 2.0;
        let b = predict_rates(&chain, &e).unwrap();
        for (sa, sb) in a.stages.iter().zip(&b.stages) {
            assert!((sb.signal - 2.0 * sa.signal).abs() < 1e-6 * sb.signal.max(1.0));
        }
    }

    #[test]
    fn extra_loss_never_raises_rates() {
        let e = EmitterModel::default();
        let base = predict_rates(&toy_chain(30.0), &e).unwrap();
        for pos in 0..=4 {
            let mut chain = toy_chain(30.0);
            chain
                .stages
                .insert(pos, Stage::new("extra", StageKind::Loss { transmission: 0.7 }));
            let r = predict_rates(&chain, &e).unwrap();
            assert!(r.output <= base.output && r.noise <= base.noise);
        }
    }

    #[test]
    fn stage_validation() {
        let mut chain = toy_chain(30.0);
        chain.stages[0].kind = StageKind::Loss { transmission: 1.2 };
        assert!(chain.validate().is_err());
        let mut chain = toy_chain(-1.0);
        assert!(chain.validate().is_err());
        chain = toy_chain(3.0);
        chain.pump_power = -0.1;
        assert!(chain.validate().is_err());
    }
}
