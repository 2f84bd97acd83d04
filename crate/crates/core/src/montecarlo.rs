//! Pulse-by-pulse detector simulation for HBT and UMZI setups.
//!
//! Pulses are processed in fixed blocks of [`BLOCK_PULSES`]. Every block owns
//! independent ChaCha streams derived from `(seed, block)`, so the tag stream
//! does not depend on the thread count. Blocks are merged in order through a
//! watermark buffer, then a sequential per-channel dead-time pass feeds the
//! sink.
//!
//! In the UMZI the long arm shifts photons by `k` pulse slots. A block owns
//! the detection slots of its pulses, so the long-arm photons of a block's
//! last `k` pulses land in the next block. Those tail pulses are drawn from a
//! separate per-pulse stream that both neighbours can regenerate.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{predict_rates, ChainModel, EmitterModel};
use crate::correlator::StreamingCorrelator;
use crate::error::{Error, Result};
use crate::tagstore::{TagWriter, TimeTag, FLAG_BACKGROUND};
use crate::units;

/// Pulses per RNG block. Part of the determinism contract: changing it
/// changes every simulated stream.
pub const BLOCK_PULSES: u64 = 1 << 18;

/// Largest UMZI delay, in pulse periods, treated as interfering.
pub const MAX_SLOT_SHIFT: u64 = 1024;

/// Relative delay mismatch below which long-arm photons meet the next pulses.
pub const DELAY_MATCH_TOLERANCE: f64 = 1e-3;

/// Jitter draws beyond this many sigma are redrawn.
const JITTER_CUTOFF: f64 = 8.0;

/// Time of pulse 0, leaving room for negative jitter.
const ORIGIN_PS: f64 = 10_000.0;

/// Photon-number distribution truncated at two photons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhotonNumberDist {
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
}

impl PhotonNumberDist {
    pub fn new(p1: f64, p2: f64) -> Result<Self> {
        if !(p1 >= 0.0 && p2 >= 0.0 && p1 + p2 <= 1.0 + 1e-12) {
            return Err(Error::Invalid(format!("invalid photon-number probabilities p1={p1}, p2={p2}")));
        }
        Ok(Self {
            p0: (1.0 - p1 - p2).max(0.0),
            p1,
            p2,
        })
    }

    pub fn mean(&self) -> f64 {
        self.p1 + 2.0 * self.p2
    }

    /// ⟨n(n−1)⟩/⟨n⟩².
    pub fn g2(&self) -> f64 {
        let m = self.mean();
        if m == 0.0 {
            0.0
        } else {
            2.0 * self.p2 / (m * m)
        }
    }

    /// Distribution after each photon independently survives with probability `t`.
    pub fn after_loss(&self, t: f64) -> Self {
        let p2 = self.p2 * t * t;
        let p1 = self.p1 * t + 2.0 * self.p2 * t * (1.0 - t);
        Self {
            p0: 1.0 - p1 - p2,
            p1,
            p2,
        }
    }
}

/// Solves p1 + p2 = `brightness` and 2p2/(p1 + 2p2)² = `g2_target`.
///
/// The quadratic g·p2² + 2(gb − 1)·p2 + g·b² = 0 has a root with p2 ≤ b only
/// for g ≤ 1/(2b).
pub fn calibrate_distribution(brightness: f64, g2_target: f64) -> Result<PhotonNumberDist> {
    if !(brightness > 0.0 && brightness <= 1.0) {
        return Err(Error::Invalid(format!("brightness must lie in (0, 1], got {brightness}")));
    }
    let max_g2 = 1.0 / (2.0 * brightness);
    if !(g2_target >= 0.0 && g2_target <= max_g2) {
        return Err(Error::Calibration {
            brightness,
            g2: g2_target,
            max_g2,
        });
    }
    if g2_target == 0.0 {
        return PhotonNumberDist::new(brightness, 0.0);
    }
    let (b, g) = (brightness, g2_target);
    let disc = (1.0 - 2.0 * g * b).max(0.0);
    // Rationalized root, stable for small g.
    let p2 = g * b * b / ((1.0 - g * b) + disc.sqrt());
    PhotonNumberDist::new(b - p2, p2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorModel {
    pub efficiency: f64,
    #[serde(deserialize_with = "units::hz")]
    pub dark_rate: f64,
    #[serde(deserialize_with = "units::ps")]
    pub jitter_sigma: f64,
    #[serde(deserialize_with = "units::ps")]
    pub dead_time: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            efficiency: 0.85,
            dark_rate: 100.0,
            jitter_sigma: 35.0,
            dead_time: 10_000.0,
        }
    }
}

impl DetectorModel {
    /// Unit efficiency, no jitter, no dark counts, no dead time.
    pub fn ideal() -> Self {
        Self {
            efficiency: 1.0,
            dark_rate: 0.0,
            jitter_sigma: 0.0,
            dead_time: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::Invalid(format!("detector efficiency {} outside [0, 1]", self.efficiency)));
        }
        for (name, v) in [
            ("dark_rate", self.dark_rate),
            ("jitter_sigma", self.jitter_sigma),
            ("dead_time", self.dead_time),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("detector {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupKind {
    Hbt,
    Umzi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    Co,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementSetup {
    pub kind: SetupKind,
    #[serde(deserialize_with = "units::ps")]
    pub umzi_delay: f64,
    pub polarization: Polarization,
    pub splitter_ratio: f64,
    pub detectors: [DetectorModel; 2],
}

impl Default for MeasurementSetup {
    fn default() -> Self {
        Self {
            kind: SetupKind::Hbt,
            umzi_delay: 13_158.0,
            polarization: Polarization::Co,
            splitter_ratio: 0.5,
            detectors: [DetectorModel::default(); 2],
        }
    }
}

impl MeasurementSetup {
    pub fn hbt() -> Self {
        Self::default()
    }

    pub fn umzi(polarization: Polarization) -> Self {
        Self {
            kind: SetupKind::Umzi,
            polarization,
            ..Self::default()
        }
    }

    pub fn with_detectors(self, detector: DetectorModel) -> Self {
        Self {
            detectors: [detector; 2],
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.splitter_ratio > 0.0 && self.splitter_ratio < 1.0) {
            return Err(Error::Invalid(format!(
                "splitter_ratio must lie in (0, 1), got {}",
                self.splitter_ratio
            )));
        }
        if self.kind == SetupKind::Umzi && !(self.umzi_delay > 0.0 && self.umzi_delay.is_finite()) {
            return Err(Error::Invalid(format!("umzi_delay must be positive, got {}", self.umzi_delay)));
        }
        self.detectors.iter().try_for_each(DetectorModel::validate)
    }
}

/// One simulation. A missing chain means the detectors sit directly on the
/// source fiber.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRun {
    pub seed: u64,
    pub n_pulses: u64,
    pub emitter: EmitterModel,
    pub chain: Option<ChainModel>,
    pub setup: MeasurementSetup,
}

impl SimRun {
    pub fn validate(&self) -> Result<()> {
        if self.n_pulses == 0 {
            return Err(Error::Invalid("n_pulses must be at least 1".into()));
        }
        self.emitter.validate()?;
        if let Some(chain) = &self.chain {
            chain.validate()?;
        }
        self.setup.validate()
    }
}

/// Where simulated tags go.
pub trait TagSink {
    fn push(&mut self, tag: TimeTag) -> Result<()>;
}

impl TagSink for Vec<TimeTag> {
    fn push(&mut self, tag: TimeTag) -> Result<()> {
        Vec::push(self, tag);
        Ok(())
    }
}

impl<W: Write> TagSink for TagWriter<W> {
    fn push(&mut self, tag: TimeTag) -> Result<()> {
        TagWriter::push(self, tag)
    }
}

impl TagSink for StreamingCorrelator {
    fn push(&mut self, tag: TimeTag) -> Result<()> {
        StreamingCorrelator::push(self, tag)
    }
}

/// Feeds several correlators from one pass.
impl TagSink for [StreamingCorrelator] {
    fn push(&mut self, tag: TimeTag) -> Result<()> {
        self.iter_mut().try_for_each(|c| c.push(tag))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub pulses: u64,
    pub blocks: u64,
    /// Photon-number distribution at the detectors' input.
    pub distribution: PhotonNumberDist,
    pub transmission: f64,
    /// Chain noise at the output, Hz.
    pub noise_rate: f64,
    /// UMZI delay in pulse slots, when matched.
    pub slot_shift: Option<u64>,
    pub span_ps: u64,
    pub tags: [u64; 2],
    pub background_tags: [u64; 2],
    pub dead_time_removed: [u64; 2],
}

/// Everything derived from a run that the block workers and the oracle share.
#[derive(Debug, Clone)]
struct Plan {
    period: f64,
    delay: f64,
    umzi: bool,
    /// Long-arm shift in slots when photons of neighbouring pulses meet.
    shift: Option<u64>,
    overlap: f64,
    ratio: f64,
    dist: PhotonNumberDist,
    transmission: f64,
    noise_rate: f64,
    detectors: [DetectorModel; 2],
    /// Background click rate per detector, Hz.
    background: [f64; 2],
    n_pulses: u64,
    end_time: f64,
    margin: f64,
}

impl Plan {
    fn new(run: &SimRun) -> Result<Self> {
        run.validate()?;
        let source = calibrate_distribution(run.emitter.brightness, run.emitter.g2_target)?;
        let (transmission, noise_rate) = match &run.chain {
            Some(chain) => (chain.transmission()?, predict_rates(chain, &run.emitter)?.noise),
            None => (1.0, 0.0),
        };
        if transmission > 1.0 {
            return Err(Error::Invalid(format!("chain transmission {transmission} exceeds 1")));
        }
        let setup = &run.setup;
        let period = run.emitter.period_ps();
        let umzi = setup.kind == SetupKind::Umzi;
        let shift = if umzi { matched_shift(setup.umzi_delay, period) } else { None };
        let overlap = match (umzi, setup.polarization) {
            (true, Polarization::Co) => run.emitter.overlap,
            _ => 0.0,
        };
        let r = setup.splitter_ratio;
        let det = setup.detectors;
        let background = [
            det[0].dark_rate + noise_rate * r * det[0].efficiency,
            det[1].dark_rate + noise_rate * (1.0 - r) * det[1].efficiency,
        ];
        let delay = if umzi { setup.umzi_delay } else { 0.0 };
        let sigma = det[0].jitter_sigma.max(det[1].jitter_sigma);
        let mismatch = match shift {
            Some(k) => (delay - k as f64 * period).abs(),
            None => delay,
        };
        let tail = JITTER_CUTOFF * sigma + mismatch + 16.0;
        Ok(Self {
            period,
            delay,
            umzi,
            shift,
            overlap,
            ratio: r,
            dist: source.after_loss(transmission),
            transmission,
            noise_rate,
            detectors: det,
            background,
            n_pulses: run.n_pulses,
            end_time: ORIGIN_PS + run.n_pulses as f64 * period + delay + tail,
            margin: tail,
        })
    }

    fn blocks(&self) -> u64 {
        self.n_pulses.div_ceil(BLOCK_PULSES)
    }

    fn block_start_time(&self, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            ORIGIN_PS + (b * BLOCK_PULSES) as f64 * self.period
        }
    }

    fn block_end_time(&self, b: u64) -> f64 {
        if b + 1 == self.blocks() {
            self.end_time
        } else {
            self.block_start_time(b + 1)
        }
    }

    fn tail_len(&self) -> u64 {
        self.shift.unwrap_or(0)
    }
}

/// Delay in whole slots when it matches the period closely enough to interfere.
fn matched_shift(delay: f64, period: f64) -> Option<u64> {
    let k = (delay / period).round();
    if k < 1.0 || k > MAX_SLOT_SHIFT as f64 {
        return None;
    }
    ((delay - k * period).abs() / period < DELAY_MATCH_TOLERANCE).then_some(k as u64)
}

#[derive(Clone, Copy)]
enum Purpose {
    Body = 0,
    Tail = 1,
    Detect = 2,
    Background = 3,
}

fn stream(seed: u64, block: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block * 4 + purpose as u64);
    rng
}

/// Photons of one pulse split over the short and long arm.
#[derive(Clone, Copy)]
struct Pulse {
    index: u64,
    short: u8,
    long: u8,
}

fn draw_arms<R: Rng>(rng: &mut R, n: u8, umzi: bool) -> (u8, u8) {
    if !umzi {
        return (n, 0);
    }
    let long = (0..n).filter(|_| rng.random_bool(0.5)).count() as u8;
    (n - long, long)
}

/// Tail pulses of block `b`, drawn one by one so a neighbour can rebuild them.
fn tail_pulses(plan: &Plan, seed: u64, b: u64) -> Vec<Pulse> {
    let end = ((b + 1) * BLOCK_PULSES).min(plan.n_pulses);
    let start = end.saturating_sub(plan.tail_len()).max(b * BLOCK_PULSES);
    let mut rng = stream(seed, b, Purpose::Tail);
    let (p1, p2) = (plan.dist.p1, plan.dist.p2);
    let mut out = Vec::new();
    for index in start..end {
        let u: f64 = rng.random();
        let n = if u < p2 {
            2
        } else if u < p2 + p1 {
            1
        } else {
            0
        };
        let (short, long) = draw_arms(&mut rng, n, plan.umzi);
        if n > 0 {
            out.push(Pulse { index, short, long });
        }
    }
    out
}

/// Non-empty pulses in `[start, end)`, skipping empty runs geometrically.
fn body_pulses(plan: &Plan, seed: u64, b: u64, start: u64, end: u64) -> Vec<Pulse> {
    let q = plan.dist.p1 + plan.dist.p2;
    let mut out = Vec::new();
    if q <= 0.0 || start >= end {
        return out;
    }
    let mut rng = stream(seed, b, Purpose::Body);
    let skip = Geometric::new(q).expect("probability in (0, 1]");
    let two = plan.dist.p2 / q;
    let mut index = start;
    loop {
        let gap = skip.sample(&mut rng);
        index = match index.checked_add(gap) {
            Some(i) if i < end => i,
            _ => break,
        };
        let n = if rng.random::<f64>() < two { 2 } else { 1 };
        let (short, long) = draw_arms(&mut rng, n, plan.umzi);
        out.push(Pulse { index, short, long });
        index += 1;
    }
    out
}

struct Photon {
    slot: u64,
    time: f64,
}

fn jitter<R: Rng>(rng: &mut R, normal: &Option<Normal<f64>>, sigma: f64) -> f64 {
    match normal {
        None => 0.0,
        Some(n) => loop {
            let x = n.sample(rng);
            if x.abs() <= JITTER_CUTOFF * sigma {
                break x;
            }
        },
    }
}

/// Simulates one block and returns its tags sorted by timestamp.
fn run_block(plan: &Plan, seed: u64, b: u64) -> Vec<TimeTag> {
    let start = b * BLOCK_PULSES;
    let end = ((b + 1) * BLOCK_PULSES).min(plan.n_pulses);
    let last = b + 1 == plan.blocks();
    let k = plan.tail_len();
    let body_end = end.saturating_sub(k).max(start);

    let mut photons = Vec::new();
    let mut emit = |p: &Pulse, short: bool, long: bool| {
        let t = ORIGIN_PS + p.index as f64 * plan.period;
        if short {
            let slot = if plan.umzi && plan.shift.is_none() { 2 * p.index } else { p.index };
            for _ in 0..p.short {
                photons.push(Photon { slot, time: t });
            }
        }
        if long {
            let slot = match plan.shift {
                Some(k) => p.index + k,
                None => 2 * p.index + 1,
            };
            for _ in 0..p.long {
                photons.push(Photon {
                    slot,
                    time: t + plan.delay,
                });
            }
        }
    };
    if b > 0 && k > 0 {
        for p in tail_pulses(plan, seed, b - 1) {
            emit(&p, false, true);
        }
    }
    for p in body_pulses(plan, seed, b, start, body_end) {
        emit(&p, true, true);
    }
    if k > 0 {
        for p in tail_pulses(plan, seed, b) {
            emit(&p, true, last);
        }
    }
    photons.sort_by_key(|p| p.slot);

    let mut rng = stream(seed, b, Purpose::Detect);
    let normals = plan.detectors.map(|d| (d.jitter_sigma > 0.0).then(|| Normal::new(0.0, d.jitter_sigma).expect("finite sigma")));
    let mut tags = Vec::new();
    let mut i = 0;
    while i < photons.len() {
        let slot = photons[i].slot;
        let mut j = i;
        while j < photons.len() && photons[j].slot == slot {
            j += 1;
        }
        let group = &photons[i..j];
        let bunched = group.len() == 2 && plan.overlap > 0.0 && rng.random::<f64>() < plan.overlap;
        let common_port = bunched.then(|| usize::from(rng.random::<f64>() >= plan.ratio));
        // A detector clicks once per slot, at its earliest detected photon.
        let mut click: [Option<f64>; 2] = [None, None];
        for ph in group {
            let port = match common_port {
                Some(p) => p,
                None => usize::from(rng.random::<f64>() >= plan.ratio),
            };
            if rng.random::<f64>() < plan.detectors[port].efficiency {
                let t = ph.time + jitter(&mut rng, &normals[port], plan.detectors[port].jitter_sigma);
                click[port] = Some(click[port].map_or(t, |c: f64| c.min(t)));
            }
        }
        for (ch, c) in click.iter().enumerate() {
            if let Some(t) = c {
                tags.push(TimeTag::new(t.round() as u64, ch as u8));
            }
        }
        i = j;
    }

    let mut rng = stream(seed, b, Purpose::Background);
    let (t0, t1) = (plan.block_start_time(b), plan.block_end_time(b));
    for (ch, &rate) in plan.background.iter().enumerate() {
        let mean = rate * (t1 - t0) * 1e-12;
        if mean <= 0.0 {
            continue;
        }
        let n = Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64;
        for _ in 0..n {
            let t = rng.random_range(t0..t1);
            tags.push(TimeTag {
                timestamp: t.round() as u64,
                channel: ch as u8,
                flags: FLAG_BACKGROUND,
            });
        }
    }
    tags.sort_unstable();
    tags
}

fn merge_sorted(a: Vec<TimeTag>, b: Vec<TimeTag>) -> Vec<TimeTag> {
    if a.is_empty() {
        return b;
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

struct DeadTime {
    dead: [u64; 2],
    last: [Option<u64>; 2],
    tags: [u64; 2],
    background: [u64; 2],
    removed: [u64; 2],
}

impl DeadTime {
    fn push<S: TagSink + ?Sized>(&mut self, tag: TimeTag, sink: &mut S) -> Result<()> {
        let ch = tag.channel as usize;
        if let Some(last) = self.last[ch] {
            if tag.timestamp - last < self.dead[ch] {
                self.removed[ch] += 1;
                return Ok(());
            }
        }
        self.last[ch] = Some(tag.timestamp);
        self.tags[ch] += 1;
        if tag.flags & FLAG_BACKGROUND != 0 {
            self.background[ch] += 1;
        }
        sink.push(tag)
    }
}

/// Runs the simulation and streams globally time-ordered tags into `sink`.
///
/// Output depends only on the run, never on the rayon thread count.
pub fn simulate<S: TagSink + ?Sized>(run: &SimRun, sink: &mut S) -> Result<SimSummary> {
    let plan = Plan::new(run)?;
    let blocks = plan.blocks();
    let batch = (rayon::current_num_threads() as u64 * 4).max(1);
    let mut dead = DeadTime {
        dead: plan.detectors.map(|d| d.dead_time.round() as u64),
        last: [None; 2],
        tags: [0; 2],
        background: [0; 2],
        removed: [0; 2],
    };
    let mut pending: Vec<TimeTag> = Vec::new();
    let mut first = 0;
    while first < blocks {
        let upto = (first + batch).min(blocks);
        let done: Vec<Vec<TimeTag>> = (first..upto)
            .into_par_iter()
            .map(|b| run_block(&plan, run.seed, b))
            .collect();
        for (b, tags) in (first..upto).zip(done) {
            pending = merge_sorted(pending, tags);
            let watermark = if b + 1 == blocks {
                u64::MAX
            } else {
                (plan.block_start_time(b + 1) - plan.margin).max(0.0) as u64
            };
            let cut = pending.partition_point(|t| t.timestamp < watermark);
            for tag in pending.drain(..cut) {
                dead.push(tag, sink)?;
            }
        }
        first = upto;
    }
    Ok(SimSummary {
        pulses: run.n_pulses,
        blocks,
        distribution: plan.dist,
        transmission: plan.transmission,
        noise_rate: plan.noise_rate,
        slot_shift: plan.shift,
        span_ps: plan.end_time.ceil() as u64,
        tags: dead.tags,
        background_tags: dead.background,
        dead_time_removed: dead.removed,
    })
}

/// Expected coincidences per pulse in each peak window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticPeaks {
    /// Peak index n ∈ −2..=2 → expected counts per pulse.
    pub areas: BTreeMap<i64, f64>,
    /// Level of peaks far from zero delay.
    pub far: f64,
    /// Expected clicks per pulse on each detector.
    pub singles: [f64; 2],
}

impl AnalyticPeaks {
    /// Mean over the side peaks 1 ≤ |n| ≤ `n_max`.
    pub fn side_mean(&self, n_max: i64) -> f64 {
        let n_max = n_max.max(1);
        let sum: f64 = (1..=n_max)
            .flat_map(|n| [n, -n])
            .map(|n| self.areas.get(&n).copied().unwrap_or(self.far))
            .sum();
        sum / (2 * n_max) as f64
    }

    /// A₀ over the mean of the side peaks out to ±`n_max`.
    pub fn g2(&self, n_max: i64) -> f64 {
        self.areas[&0] / self.side_mean(n_max)
    }
}

/// Joint click probabilities `[a][b]` of the two detectors for `c` photons in one slot.
fn slot_clicks(c: usize, plan: &Plan) -> [[f64; 2]; 2] {
    let r = plan.ratio;
    let mut port_a = vec![0.0; c + 1];
    for (j, p) in port_a.iter_mut().enumerate() {
        *p = binomial(c, j) * r.powi(j as i32) * (1.0 - r).powi((c - j) as i32);
    }
    if c == 2 {
        let m = plan.overlap;
        port_a[2] = m * r + (1.0 - m) * r * r;
        port_a[1] = (1.0 - m) * 2.0 * r * (1.0 - r);
        port_a[0] = m * (1.0 - r) + (1.0 - m) * (1.0 - r) * (1.0 - r);
    }
    let (ea, eb) = (plan.detectors[0].efficiency, plan.detectors[1].efficiency);
    let mut out = [[0.0; 2]; 2];
    for (j, &p) in port_a.iter().enumerate() {
        let ca = 1.0 - (1.0 - ea).powi(j as i32);
        let cb = 1.0 - (1.0 - eb).powi((c - j) as i32);
        out[1][1] += p * ca * cb;
        out[1][0] += p * ca * (1.0 - cb);
        out[0][1] += p * (1.0 - ca) * cb;
        out[0][0] += p * (1.0 - ca) * (1.0 - cb);
    }
    out
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact expected peak areas by enumerating photon numbers, arm choices and
/// routing of the pulses that feed each pair of detection slots.
///
/// Background (dark counts and chain noise) enters as a flat first-order
/// term over windows of ±`window_half_width` ps. Dead time is neglected.
pub fn analytic_histogram(run: &SimRun, window_half_width: f64) -> Result<AnalyticPeaks> {
    let plan = Plan::new(run)?;
    if plan.umzi && plan.shift.is_none() {
        return Err(Error::Invalid(
            "the enumeration needs a UMZI delay matched to a whole number of periods".into(),
        ));
    }
    let k = plan.shift.unwrap_or(1) as i64;
    let d = plan.dist;
    let mut states: Vec<((usize, usize), f64)> = vec![((0, 0), d.p0)];
    if plan.umzi {
        states.extend([
            ((1, 0), d.p1 / 2.0),
            ((0, 1), d.p1 / 2.0),
            ((2, 0), d.p2 / 4.0),
            ((1, 1), d.p2 / 2.0),
            ((0, 2), d.p2 / 4.0),
        ]);
    } else {
        states.extend([((1, 0), d.p1), ((2, 0), d.p2)]);
    }
    let max_c = 4;
    let joint: Vec<[[f64; 2]; 2]> = (0..=max_c).map(|c| slot_clicks(c, &plan)).collect();
    let click_a: Vec<f64> = joint.iter().map(|j| j[1][0] + j[1][1]).collect();
    let click_b: Vec<f64> = joint.iter().map(|j| j[0][1] + j[1][1]).collect();

    // Slot i holds the short arm of pulse i and the long arm of pulse i − k.
    let mut zero = 0.0;
    let mut single = [0.0; 2];
    for &((_, l_prev), p_prev) in &states {
        for &((s, _), p) in &states {
            let c = l_prev + s;
            zero += p_prev * p * joint[c][1][1];
            single[0] += p_prev * p * click_a[c];
            single[1] += p_prev * p * click_b[c];
        }
    }
    // A in slot i, B in slot i + k: pulse i feeds both slots.
    let mut shared = 0.0;
    for &((_, l0), p0) in &states {
        for &((s1, l1), p1) in &states {
            for &((s2, _), p2) in &states {
                shared += p0 * p1 * p2 * click_a[l0 + s1] * click_b[l1 + s2];
            }
        }
    }
    // By the symmetry of the enumeration A in i, B in i − k swaps the detector roles.
    let mut shared_neg = 0.0;
    for &((_, l0), p0) in &states {
        for &((s1, l1), p1) in &states {
            for &((s2, _), p2) in &states {
                shared_neg += p0 * p1 * p2 * click_b[l0 + s1] * click_a[l1 + s2];
            }
        }
    }
    let far = single[0] * single[1];
    let bg = [plan.background[0] * 1e-12, plan.background[1] * 1e-12];
    let width = 2.0 * window_half_width;
    let flat = single[0] * bg[1] * width + bg[0] * single[1] * width + bg[0] * bg[1] * width * plan.period;
    let mut areas = BTreeMap::new();
    for n in -2i64..=2 {
        let signal = if n == 0 {
            zero
        } else if n == k {
            shared
        } else if n == -k {
            shared_neg
        } else {
            far
        };
        areas.insert(n, signal + flat);
    }
    Ok(AnalyticPeaks {
        areas,
        far: far + flat,
        singles: [single[0] + bg[0] * plan.period, single[1] + bg[1] * plan.period],
    })
}
