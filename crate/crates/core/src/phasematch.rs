//! Quasi-phase-matching of the difference-frequency process in a PPLN waveguide.
//!
//! Wavelengths are in nm, temperatures in °C, poling periods in µm and crystal
//! lengths in cm at the public surface; wave-vector mismatches are in rad/m.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wavelength window in which the dispersion fit is trusted, nm.
pub const VALID_WAVELENGTH_NM: (f64, f64) = (400.0, 4000.0);
/// Temperature window accepted by the dispersion model, °C.
pub const VALID_TEMPERATURE_C: (f64, f64) = (0.0, 250.0);

/// Solver acceptance on |Δk|, rad/m.
pub const DELTA_K_TOLERANCE: f64 = 1e-3;

const PERIOD_BRACKET_UM: (f64, f64) = (5.0, 50.0);
const PERIOD_SCAN_STEP_UM: f64 = 0.5;
const TEMPERATURE_BRACKET_C: (f64, f64) = (20.0, 200.0);
const TEMPERATURE_SCAN_STEP_C: f64 = 2.0;

/// Half-width of the sinc² central lobe at half maximum: sinc²(x) = ½ at x ≈ 1.39156.
pub const SINC2_HALF_WIDTH: f64 = 1.391_557_378_251_51;

/// Temperature-dependent Sellmeier fit for the extraordinary index:
///
/// n² = a1 + b1·f + (a2 + b2·f)/(λ² − (a3 + b3·f)²) + (a4 + b4·f)/(λ² − a5²) − a6·λ²
///
/// with λ in µm and f = (T − t_ref)(T + t_shift).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SellmeierCoefficients {
    pub a: [f64; 6],
    pub b: [f64; 4],
    pub t_ref: f64,
    pub t_shift: f64,
}

impl SellmeierCoefficients {
    /// Congruent lithium niobate, extraordinary polarization (Jundt, Opt. Lett. 22, 1553, 1997).
    pub const CONGRUENT_LN: Self = Self {
        a: [5.35583, 0.100473, 0.20692, 100.0, 11.34927, 1.5334e-2],
        b: [4.629e-7, 3.862e-8, -0.89e-8, 2.657e-5],
        t_ref: 24.5,
        t_shift: 570.82,
    };

    fn index_squared(&self, lambda_um: f64, t_c: f64) -> f64 {
        let [a1, a2, a3, a4, a5, a6] = self.a;
        let [b1, b2, b3, b4] = self.b;
        let f = (t_c - self.t_ref) * (t_c + self.t_shift);
        let l2 = lambda_um * lambda_um;
        let uv_pole = a3 + b3 * f;
        a1 + b1 * f + (a2 + b2 * f) / (l2 - uv_pole * uv_pole) + (a4 + b4 * f) / (l2 - a5 * a5)
            - a6 * l2
    }

    fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|c| c.is_finite())
            && self.t_ref.is_finite()
            && self.t_shift.is_finite()
    }
}

impl Default for SellmeierCoefficients {
    fn default() -> Self {
        Self::CONGRUENT_LN
    }
}

/// Refractive-index model used for the three interacting waves.
///
/// The waveguide's effective index is approximated as the bulk index plus a
/// constant offset, minus a confinement term `confinement·λ²` (λ in µm) that
/// grows with wavelength. A constant offset drops out of Δk exactly (energy
/// conservation), so phase-matching calibration acts on `confinement`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DispersionModel {
    pub sellmeier: SellmeierCoefficients,
    pub effective_index_offset: f64,
    /// µm⁻².
    pub confinement: f64,
}

impl Default for DispersionModel {
    fn default() -> Self {
        Self {
            sellmeier: SellmeierCoefficients::CONGRUENT_LN,
            effective_index_offset: 0.0,
            confinement: 0.0,
        }
    }
}

impl DispersionModel {
    pub fn with_offset(mut self, offset: f64) -> Self {
        self.effective_index_offset = offset;
        self
    }

    /// Effective index at `lambda_nm` and `t_c`.
    pub fn refractive_index(&self, lambda_nm: f64, t_c: f64) -> Result<f64> {
        let (lo, hi) = VALID_WAVELENGTH_NM;
        if !(lo..=hi).contains(&lambda_nm) {
            return Err(Error::Range {
                quantity: "wavelength",
                value: lambda_nm,
                min: lo,
                max: hi,
                unit: "nm",
            });
        }
        let (tlo, thi) = VALID_TEMPERATURE_C;
        if !(tlo..=thi).contains(&t_c) {
            return Err(Error::Range {
                quantity: "temperature",
                value: t_c,
                min: tlo,
                max: thi,
                unit: "°C",
            });
        }
        if !self.sellmeier.is_finite()
            || !self.effective_index_offset.is_finite()
            || !self.confinement.is_finite()
        {
            return Err(Error::Invalid("dispersion coefficients must be finite".into()));
        }
        let lambda_um = lambda_nm * 1e-3;
        let bulk = self.sellmeier.index_squared(lambda_um, t_c).sqrt();
        Ok(bulk + self.effective_index_offset - self.confinement * lambda_um * lambda_um)
    }

    /// Wavenumber 2πn/λ in rad/m.
    fn wavenumber(&self, lambda_nm: f64, t_c: f64) -> Result<f64> {
        Ok(2.0 * PI * self.refractive_index(lambda_nm, t_c)? / (lambda_nm * 1e-9))
    }

    /// Returns a copy whose confinement term makes `poling_period_um` the
    /// phase-matched period for the given signal/pump pair at `t_c`.
    pub fn calibrated(
        &self,
        lambda_sig: f64,
        lambda_pump: f64,
        t_c: f64,
        poling_period_um: f64,
    ) -> Result<Self> {
        let lambda_conv = energy_match(lambda_sig, lambda_pump, SolveFor::Conv)?;
        let base = Self {
            confinement: 0.0,
            ..*self
        };
        let mismatch = base.material_mismatch(lambda_sig, lambda_pump, lambda_conv, t_c)?
            - 2.0 * PI / (poling_period_um * 1e-6);
        // d(Δk)/d(confinement) = −2π·1e-6·(λs − λp − λc) with λ in µm; linear, so one step is exact.
        let (ls, lp, lc) = (lambda_sig * 1e-3, lambda_pump * 1e-3, lambda_conv * 1e-3);
        let slope = -2.0 * PI * 1e6 * (ls - lp - lc);
        if slope == 0.0 {
            return Err(Error::Domain("calibration slope vanishes".into()));
        }
        Ok(Self {
            confinement: -mismatch / slope,
            ..*self
        })
    }

    /// k_sig − k_pump − k_conv, rad/m.
    fn material_mismatch(&self, sig: f64, pump: f64, conv: f64, t_c: f64) -> Result<f64> {
        Ok(self.wavenumber(sig, t_c)? - self.wavenumber(pump, t_c)? - self.wavenumber(conv, t_c)?)
    }
}

/// Which wavelength `energy_match` solves for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveFor {
    /// Given (signal, pump), return the converted wavelength.
    Conv,
    /// Given (signal, converted), return the pump wavelength.
    Pump,
}

/// Third wavelength closing 1/λ_sig − 1/λ_pump = 1/λ_conv.
pub fn energy_match(lambda_a: f64, lambda_b: f64, solve_for: SolveFor) -> Result<f64> {
    if !(lambda_a > 0.0 && lambda_b > 0.0) || !lambda_a.is_finite() || !lambda_b.is_finite() {
        return Err(Error::Domain(format!(
            "wavelengths must be positive and finite, got {lambda_a} nm and {lambda_b} nm"
        )));
    }
    let inv = 1.0 / lambda_a - 1.0 / lambda_b;
    if inv <= 0.0 {
        let what = match solve_for {
            SolveFor::Conv => "signal must be shorter than pump",
            SolveFor::Pump => "signal must be shorter than converted wavelength",
        };
        return Err(Error::Domain(format!(
            "{what} ({lambda_a} nm, {lambda_b} nm)"
        )));
    }
    Ok(1.0 / inv)
}

/// Operating point of the converter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMatchSpec {
    pub lambda_sig: f64,
    pub lambda_pump: f64,
    pub lambda_conv: f64,
    pub poling_period: f64,
    pub temperature: f64,
    pub crystal_length: f64,
    pub qpm_order: i32,
}

impl PhaseMatchSpec {
    /// Builds a spec with the converted wavelength closed by energy conservation.
    pub fn new(
        lambda_sig: f64,
        lambda_pump: f64,
        poling_period: f64,
        temperature: f64,
        crystal_length: f64,
    ) -> Result<Self> {
        let spec = Self {
            lambda_sig,
            lambda_pump,
            lambda_conv: energy_match(lambda_sig, lambda_pump, SolveFor::Conv)?,
            poling_period,
            temperature,
            crystal_length,
            qpm_order: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crystal_length > 0.0) {
            return Err(Error::Invalid(format!(
                "crystal length must be positive, got {} cm",
                self.crystal_length
            )));
        }
        if !(self.poling_period > 0.0) {
            return Err(Error::Invalid(format!(
                "poling period must be positive, got {} µm",
                self.poling_period
            )));
        }
        if self.qpm_order == 0 {
            return Err(Error::Invalid("qpm order must be nonzero".into()));
        }
        let closure = self.energy_closure();
        if closure.abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "energy conservation violated by {closure:.3e} nm⁻¹"
            )));
        }
        Ok(())
    }

    /// 1/λ_sig − 1/λ_pump − 1/λ_conv in nm⁻¹.
    pub fn energy_closure(&self) -> f64 {
        1.0 / self.lambda_sig - 1.0 / self.lambda_pump - 1.0 / self.lambda_conv
    }

    fn with_signal(&self, lambda_sig: f64) -> Result<Self> {
        Ok(Self {
            lambda_sig,
            lambda_conv: energy_match(lambda_sig, self.lambda_pump, SolveFor::Conv)?,
            ..*self
        })
    }

    fn with_pump(&self, lambda_pump: f64) -> Result<Self> {
        Ok(Self {
            lambda_pump,
            lambda_conv: energy_match(self.lambda_sig, lambda_pump, SolveFor::Conv)?,
            ..*self
        })
    }
}

/// Wave-vector mismatch Δk = k_sig − k_pump − k_conv − m·2π/Λ in rad/m.
///
/// The grating vector of order m points against the signal's excess
/// momentum, so first-order matching in normally dispersive media uses m = +1.
pub fn delta_k(spec: &PhaseMatchSpec, model: &DispersionModel) -> Result<f64> {
    let material =
        model.material_mismatch(spec.lambda_sig, spec.lambda_pump, spec.lambda_conv, spec.temperature)?;
    Ok(material - f64::from(spec.qpm_order) * 2.0 * PI / (spec.poling_period * 1e-6))
}

/// Scans `[lo, hi]` with `step` for the first sign change of `f`, then bisects.
fn bracket_and_bisect(
    what: &'static str,
    unit: &'static str,
    (lo, hi): (f64, f64),
    step: f64,
    f: impl Fn(f64) -> Result<f64>,
) -> Result<f64> {
    let n_steps = ((hi - lo) / step).round() as usize;
    let mut x0 = lo;
    let mut f0 = f(x0)?;
    if f0 == 0.0 {
        return Ok(x0);
    }
    let f_lo = f0;
    for i in 1..=n_steps {
        let x1 = if i == n_steps { hi } else { lo + i as f64 * step };
        let f1 = f(x1)?;
        if f1 == 0.0 {
            return Ok(x1);
        }
        if f0.signum() != f1.signum() {
            return bisect(x0, x1, f0, &f);
        }
        x0 = x1;
        f0 = f1;
    }
    Err(Error::NoRoot {
        what,
        lo,
        hi,
        unit,
        f_lo,
        f_hi: f0,
    })
}

fn bisect(mut a: f64, mut b: f64, mut fa: f64, f: &impl Fn(f64) -> Result<f64>) -> Result<f64> {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m)?;
        if fm.abs() < DELTA_K_TOLERANCE * 1e-3 || m == a || m == b {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Poling period (µm) phase-matching the signal/pump pair at `t_c`.
pub fn solve_poling_period(
    lambda_sig: f64,
    lambda_pump: f64,
    t_c: f64,
    model: &DispersionModel,
) -> Result<f64> {
    let spec = PhaseMatchSpec::new(lambda_sig, lambda_pump, 1.0, t_c, 1.0)?;
    bracket_and_bisect("Δk(Λ)", "µm", PERIOD_BRACKET_UM, PERIOD_SCAN_STEP_UM, |period| {
        delta_k(
            &PhaseMatchSpec {
                poling_period: period,
                ..spec
            },
            model,
        )
    })
}

/// Crystal temperature (°C) phase-matching the signal/pump pair for a given period.
pub fn solve_temperature(
    lambda_sig: f64,
    lambda_pump: f64,
    poling_period_um: f64,
    model: &DispersionModel,
) -> Result<f64> {
    let spec = PhaseMatchSpec::new(lambda_sig, lambda_pump, poling_period_um, 25.0, 1.0)?;
    bracket_and_bisect(
        "Δk(T)",
        "°C",
        TEMPERATURE_BRACKET_C,
        TEMPERATURE_SCAN_STEP_C,
        |t| {
            delta_k(
                &PhaseMatchSpec {
                    temperature: t,
                    ..spec
                },
                model,
            )
        },
    )
}

/// Signal wavelength shift per kelvin that keeps Δk fixed (nm/°C), at fixed pump.
///
/// Converts widths measured on a temperature scan into signal-wavelength widths.
pub fn signal_wavelength_per_kelvin(spec: &PhaseMatchSpec, model: &DispersionModel) -> Result<f64> {
    let dt = 0.01;
    let dl = 1e-3;
    let dk_dt = (delta_k(&PhaseMatchSpec { temperature: spec.temperature + dt, ..*spec }, model)?
        - delta_k(&PhaseMatchSpec { temperature: spec.temperature - dt, ..*spec }, model)?)
        / (2.0 * dt);
    let dk_dl = (delta_k(&spec.with_signal(spec.lambda_sig + dl)?, model)?
        - delta_k(&spec.with_signal(spec.lambda_sig - dl)?, model)?)
        / (2.0 * dl);
    if dk_dl == 0.0 {
        return Err(Error::Division("Δk is stationary in signal wavelength"));
    }
    Ok((dk_dt / dk_dl).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningAxis {
    Temperature,
    SignalWavelength,
    PumpWavelength,
}

impl TuningAxis {
    pub fn unit(self) -> &'static str {
        match self {
            TuningAxis::Temperature => "°C",
            TuningAxis::SignalWavelength | TuningAxis::PumpWavelength => "nm",
        }
    }
}

impl std::str::FromStr for TuningAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" | "t" => Ok(Self::Temperature),
            "signal_wavelength" | "signal" => Ok(Self::SignalWavelength),
            "pump_wavelength" | "pump" => Ok(Self::PumpWavelength),
            other => Err(Error::Invalid(format!(
                "unknown tuning axis `{other}` (temperature, signal_wavelength, pump_wavelength)"
            ))),
        }
    }
}

/// Sampled relative conversion efficiency along one tuning axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningCurve {
    pub axis: TuningAxis,
    #[serde(skip)]
    pub samples: Vec<(f64, f64)>,
    pub fwhm: Option<f64>,
    pub warnings: Vec<String>,
}

impl TuningCurve {
    pub fn peak(&self) -> Option<(f64, f64)> {
        self.samples
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// `x,relative_efficiency` CSV with LF line endings.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,relative_efficiency")?;
        for (x, y) in &self.samples {
            writeln!(out, "{x},{y}")?;
        }
        Ok(())
    }
}

/// sinc(x) = sin(x)/x with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

pub const MIN_SPECTRUM_SAMPLES: usize = 16;

/// Relative efficiency sinc²(Δk·L/2) sampled over `range` on `axis`.
pub fn conversion_spectrum(
    spec: &PhaseMatchSpec,
    model: &DispersionModel,
    axis: TuningAxis,
    range: (f64, f64),
    n_samples: usize,
) -> Result<TuningCurve> {
    if n_samples < MIN_SPECTRUM_SAMPLES {
        return Err(Error::Invalid(format!(
            "at least {MIN_SPECTRUM_SAMPLES} samples required, got {n_samples}"
        )));
    }
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Invalid(format!("empty tuning range [{lo}, {hi}]")));
    }
    spec.validate()?;
    let length_m = spec.crystal_length * 1e-2;
    let at = |x: f64| -> Result<f64> {
        let s = match axis {
            TuningAxis::Temperature => PhaseMatchSpec {
                temperature: x,
                ..*spec
            },
            TuningAxis::SignalWavelength => spec.with_signal(x)?,
            TuningAxis::PumpWavelength => spec.with_pump(x)?,
        };
        delta_k(&s, model)
    };

    let mut mismatches = Vec::with_capacity(n_samples);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let x = lo + (hi - lo) * i as f64 / (n_samples - 1) as f64;
        let dk = at(x)?;
        mismatches.push(dk);
        let s = sinc(0.5 * dk * length_m);
        samples.push((x, s * s));
    }

    let bracketed = mismatches.windows(2).any(|w| w[0] == 0.0 || w[0].signum() != w[1].signum())
        || mismatches.last() == Some(&0.0);
    let mut curve = TuningCurve {
        axis,
        samples,
        fwhm: None,
        warnings: Vec::new(),
    };
    if !bracketed {
        curve
            .warnings
            .push("range does not bracket the phase-matched point; fwhm unset".into());
        return Ok(curve);
    }
    match fwhm(&curve) {
        Ok(w) => curve.fwhm = Some(w),
        Err(e) => curve.warnings.push(format!("fwhm unavailable: {e}")),
    }
    Ok(curve)
}

/// Full width at half maximum of the central lobe.
///
/// Walks outward from the global maximum to the first half-level crossing on
/// each side so side lobes never widen the result.
pub fn fwhm(curve: &TuningCurve) -> Result<f64> {
    let s = &curve.samples;
    let (ipk, &(_, peak)) = s
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .ok_or(Error::Bracket { side: "left" })?;
    let half = 0.5 * peak;
    let cross = |i: usize, j: usize| {
        let (x0, y0) = s[i];
        let (x1, y1) = s[j];
        x0 + (half - y0) * (x1 - x0) / (y1 - y0)
    };
    let left = (1..=ipk)
        .rev()
        .find(|&i| s[i - 1].1 <= half && s[i].1 > half)
        .map(|i| cross(i - 1, i))
        .ok_or(Error::Bracket { side: "left" })?;
    let right = (ipk..s.len().saturating_sub(1))
        .find(|&i| s[i + 1].1 <= half && s[i].1 > half)
        .map(|i| cross(i, i + 1))
        .ok_or(Error::Bracket { side: "right" })?;
    Ok(right - left)
}
