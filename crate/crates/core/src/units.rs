//! Quantity parsing for config values.
//!
//! A config value is either a bare number, taken in the field's documented
//! unit, or a string `"<number> <unit>"`. Compound units are written as
//! `num/den` (for example `Hz/mW`). Transmissions additionally accept
//! decibel strings (`"-0.8 dB"`).

use serde::{Deserialize, Deserializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Time,
    Frequency,
    Power,
    Temperature,
}

/// Symbol, dimension, power of ten relative to the SI base unit.
const UNITS: &[(&str, Dimension, i32)] = &[
    ("pm", Dimension::Length, -12),
    ("nm", Dimension::Length, -9),
    ("um", Dimension::Length, -6),
    ("µm", Dimension::Length, -6),
    ("μm", Dimension::Length, -6),
    ("mm", Dimension::Length, -3),
    ("cm", Dimension::Length, -2),
    ("m", Dimension::Length, 0),
    ("fs", Dimension::Time, -15),
    ("ps", Dimension::Time, -12),
    ("ns", Dimension::Time, -9),
    ("us", Dimension::Time, -6),
    ("µs", Dimension::Time, -6),
    ("ms", Dimension::Time, -3),
    ("s", Dimension::Time, 0),
    ("Hz", Dimension::Frequency, 0),
    ("kHz", Dimension::Frequency, 3),
    ("MHz", Dimension::Frequency, 6),
    ("GHz", Dimension::Frequency, 9),
    ("uW", Dimension::Power, -6),
    ("µW", Dimension::Power, -6),
    ("mW", Dimension::Power, -3),
    ("W", Dimension::Power, 0),
    ("C", Dimension::Temperature, 0),
    ("°C", Dimension::Temperature, 0),
    ("degC", Dimension::Temperature, 0),
];

fn lookup(symbol: &str) -> Result<(Dimension, i32), String> {
    UNITS
        .iter()
        .find(|(s, _, _)| *s == symbol)
        .map(|&(_, d, f)| (d, f))
        .ok_or_else(|| format!("unknown unit `{symbol}`"))
}

fn split(text: &str) -> Result<(f64, &str), String> {
    let text = text.trim();
    let end = text
        .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')))
        .unwrap_or(text.len());
    // `e` is ambiguous between an exponent and a unit prefix; back off until the number parses.
    let mut cut = end;
    loop {
        if let Ok(v) = text[..cut].trim().parse::<f64>() {
            return Ok((v, text[cut..].trim()));
        }
        if cut == 0 {
            return Err(format!("cannot parse a number from `{text}`"));
        }
        cut -= 1;
    }
}

/// Parses `"<number> <unit>"` and converts it to `target` (a unit symbol or `num/den`).
pub fn parse_quantity(text: &str, target: &str) -> Result<f64, String> {
    let (value, unit) = split(text)?;
    if unit.is_empty() {
        return Ok(value);
    }
    let (from_dims, from_factor) = compound(unit)?;
    let (to_dims, to_factor) = compound(target)?;
    if from_dims != to_dims {
        return Err(format!("`{text}` has the wrong dimension, expected {target}"));
    }
    // Powers of ten stay exact, so "200 ns" is exactly 200000 ps.
    let shift = from_factor - to_factor;
    Ok(if shift >= 0 {
        value * 10f64.powi(shift)
    } else {
        value / 10f64.powi(-shift)
    })
}

fn compound(unit: &str) -> Result<((Dimension, Option<Dimension>), i32), String> {
    match unit.split_once('/') {
        Some((num, den)) => {
            let (dn, fnum) = lookup(num.trim())?;
            let (dd, fden) = lookup(den.trim())?;
            Ok(((dn, Some(dd)), fnum - fden))
        }
        None => {
            let (d, f) = lookup(unit)?;
            Ok(((d, None), f))
        }
    }
}

/// Converts a power ratio in dB (negative for loss) into a linear transmission.
pub fn db_to_transmission(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn transmission_to_db(t: f64) -> f64 {
    10.0 * t.log10()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Raw {
    Number(f64),
    Text(String),
}

fn with_unit<'de, D: Deserializer<'de>>(d: D, target: &str) -> Result<f64, D::Error> {
    match Raw::deserialize(d)? {
        Raw::Number(v) => Ok(v),
        Raw::Text(s) => parse_quantity(&s, target).map_err(serde::de::Error::custom),
    }
}

macro_rules! unit_fns {
    ($($name:ident => $unit:expr),* $(,)?) => {
        $(
            #[doc = concat!("Deserializes a quantity expressed in `", $unit, "`.")]
            pub fn $name<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
                with_unit(d, $unit)
            }
        )*
    };
}

unit_fns! {
    nm => "nm",
    um => "um",
    cm => "cm",
    ps => "ps",
    hz => "Hz",
    watt => "W",
    hz_per_mw => "Hz/mW",
    celsius => "C",
}

/// Linear transmission from a bare fraction or a `"<x> dB"` string.
pub fn transmission<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    match Raw::deserialize(d)? {
        Raw::Number(v) => Ok(v),
        Raw::Text(s) => {
            let (v, unit) = split(&s).map_err(serde::de::Error::custom)?;
            match unit {
                "dB" => Ok(db_to_transmission(v)),
                "" => Ok(v),
                "%" => Ok(v / 100.0),
                other => Err(serde::de::Error::custom(format!(
                    "transmission `{s}`: expected a fraction, % or dB, got `{other}`"
                ))),
            }
        }
    }
}

/// Decibel magnitude from a bare number or a `"<x> dB"` string.
pub fn decibel<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    match Raw::deserialize(d)? {
        Raw::Number(v) => Ok(v),
        Raw::Text(s) => {
            let (v, unit) = split(&s).map_err(serde::de::Error::custom)?;
            if unit == "dB" || unit.is_empty() {
                Ok(v)
            } else {
                Err(serde::de::Error::custom(format!("`{s}` is not a dB value")))
            }
        }
    }
}
