//! Coincidence histograms and the peak-area estimators built on them.
//!
//! Delays are integer picoseconds, `d = t_b − t_a`, binned over the half-open
//! interval `[−range, range)`. All histogramming paths (two-pointer sweep,
//! chunked parallel sweep, streaming) produce identical bins.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tagstore::TimeTag;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoincidenceHistogram {
    pub bin_width: u64,
    pub range: u64,
    #[serde(skip)]
    pub bins: Vec<u64>,
    pub channels: (u8, u8),
    pub totals: (u64, u64),
}

impl CoincidenceHistogram {
    pub fn new(bin_width: u64, range: u64, channels: (u8, u8)) -> Result<Self> {
        if bin_width == 0 || range == 0 {
            return Err(Error::Invalid("bin width and range must be positive".into()));
        }
        if !range.is_multiple_of(bin_width) {
            return Err(Error::Invalid(format!(
                "bin width {bin_width} ps does not divide range {range} ps"
            )));
        }
        Ok(Self {
            bin_width,
            range,
            bins: vec![0; (2 * range / bin_width) as usize],
            channels,
            totals: (0, 0),
        })
    }

    #[inline]
    fn index(&self, delay: i64) -> Option<usize> {
        let shifted = delay + self.range as i64;
        if shifted < 0 || shifted >= 2 * self.range as i64 {
            None
        } else {
            Some((shifted as u64 / self.bin_width) as usize)
        }
    }

    #[inline]
    fn record(&mut self, delay: i64) {
        if let Some(i) = self.index(delay) {
            self.bins[i] += 1;
        }
    }

    /// Lower edge of bin `i`, ps.
    pub fn bin_start(&self, i: usize) -> i64 {
        i as i64 * self.bin_width as i64 - self.range as i64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.bin_start(i) as f64 + 0.5 * self.bin_width as f64
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    /// Adds another histogram with identical binning.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.bin_width != other.bin_width || self.range != other.range {
            return Err(Error::Invalid("cannot merge histograms with different binning".into()));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.totals.0 += other.totals.0;
        self.totals.1 += other.totals.1;
        Ok(())
    }

    /// `delay_ps,counts` CSV keyed by bin lower edge.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "delay_ps,counts")?;
        for (i, c) in self.bins.iter().enumerate() {
            writeln!(out, "{},{c}", self.bin_start(i))?;
        }
        Ok(())
    }
}

fn check_sorted(name: &str, ts: &[u64]) -> Result<()> {
    match ts.windows(2).position(|w| w[1] < w[0]) {
        Some(i) => Err(Error::Unsorted {
            index: i + 1,
            timestamp: ts[i + 1],
            previous: ts[i],
        })
        .map_err(|e| Error::Invalid(format!("stream {name}: {e}"))),
        None => Ok(()),
    }
}

/// Sweeps a-tags in `a` against all of `b`, starting the b-window at `b_start`.
fn sweep(a: &[u64], b: &[u64], mut lo: usize, hist: &mut CoincidenceHistogram) {
    let range = hist.range;
    for &ta in a {
        let start = ta.saturating_sub(range);
        while lo < b.len() && b[lo] < start {
            lo += 1;
        }
        // Pairs at exactly ta - range are kept only when ta >= range.
        let mut j = lo;
        while j < b.len() && b[j] < ta + range {
            let d = b[j] as i64 - ta as i64;
            hist.record(d);
            j += 1;
        }
    }
}

/// Histogram of `t_b − t_a` over all pairs within `[−range, range)`.
///
/// Both inputs must be sorted. Cost is O(n·k) with k the number of partners
/// within range.
pub fn cross_correlate(a: &[u64], b: &[u64], bin_width: u64, range: u64) -> Result<CoincidenceHistogram> {
    check_sorted("a", a)?;
    check_sorted("b", b)?;
    let mut hist = CoincidenceHistogram::new(bin_width, range, (0, 1))?;
    sweep(a, b, 0, &mut hist);
    hist.totals = (a.len() as u64, b.len() as u64);
    Ok(hist)
}

/// [`cross_correlate`] split into `chunks` pieces of `a`, processed in
/// parallel and summed. Each pair belongs to the chunk owning its a-tag, so
/// nothing is double counted and the bins equal the one-shot result.
pub fn cross_correlate_chunked(
    a: &[u64],
    b: &[u64],
    bin_width: u64,
    range: u64,
    chunks: usize,
) -> Result<CoincidenceHistogram> {
    check_sorted("a", a)?;
    check_sorted("b", b)?;
    let empty = CoincidenceHistogram::new(bin_width, range, (0, 1))?;
    let size = a.len().div_ceil(chunks.max(1)).max(1);
    let mut hist = a
        .par_chunks(size)
        .map(|chunk| {
            let mut h = empty.clone();
            let start = chunk[0].saturating_sub(range);
            let lo = b.partition_point(|&t| t < start);
            sweep(chunk, b, lo, &mut h);
            h
        })
        .reduce(
            || empty.clone(),
            |mut x, y| {
                x.merge(&y).expect("identical binning");
                x
            },
        );
    hist.totals = (a.len() as u64, b.len() as u64);
    Ok(hist)
}

/// Incremental correlator for a globally time-ordered tag stream.
pub struct StreamingCorrelator {
    hist: CoincidenceHistogram,
    recent_a: VecDeque<u64>,
    recent_b: VecDeque<u64>,
    last: u64,
    seen: u64,
}

impl StreamingCorrelator {
    pub fn new(channel_a: u8, channel_b: u8, bin_width: u64, range: u64) -> Result<Self> {
        Ok(Self {
            hist: CoincidenceHistogram::new(bin_width, range, (channel_a, channel_b))?,
            recent_a: VecDeque::new(),
            recent_b: VecDeque::new(),
            last: 0,
            seen: 0,
        })
    }

    pub fn push(&mut self, tag: TimeTag) -> Result<()> {
        if tag.timestamp < self.last {
            return Err(Error::Unsorted {
                index: self.seen as usize,
                timestamp: tag.timestamp,
                previous: self.last,
            });
        }
        self.last = tag.timestamp;
        self.seen += 1;
        let (ca, cb) = self.hist.channels;
        let t = tag.timestamp;
        let range = self.hist.range;
        let is_a = tag.channel == ca;
        let is_b = tag.channel == cb;
        if !is_a && !is_b {
            return Ok(());
        }
        if is_a {
            // Partners already seen on b: d = tb − t ∈ [−range, 0].
            while self.recent_b.front().is_some_and(|&tb| tb + range < t) {
                self.recent_b.pop_front();
            }
            for &tb in &self.recent_b {
                self.hist.record(tb as i64 - t as i64);
            }
            self.hist.totals.0 += 1;
        }
        if is_b {
            // Partners already seen on a: d = t − ta ∈ [0, range).
            while self.recent_a.front().is_some_and(|&ta| ta + range <= t) {
                self.recent_a.pop_front();
            }
            for &ta in &self.recent_a {
                self.hist.record(t as i64 - ta as i64);
            }
            self.hist.totals.1 += 1;
        }
        if is_a && is_b {
            self.hist.record(0);
        }
        if is_a {
            self.recent_a.push_back(t);
        }
        if is_b {
            self.recent_b.push_back(t);
        }
        Ok(())
    }

    pub fn histogram(&self) -> &CoincidenceHistogram {
        &self.hist
    }

    pub fn finish(self) -> CoincidenceHistogram {
        self.hist
    }
}

/// Integrated counts of the periodic coincidence peaks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakAreas {
    pub period: f64,
    pub window_half_width: f64,
    /// Peak index → counts, for every complete window in the histogram.
    pub areas: BTreeMap<i64, u64>,
    pub warnings: Vec<String>,
}

impl PeakAreas {
    pub fn zero(&self) -> Option<u64> {
        self.areas.get(&0).copied()
    }

    /// Side peaks used by the g²(0) estimator (all complete n ≠ 0).
    pub fn side(&self) -> impl Iterator<Item = (i64, u64)> + '_ {
        self.areas.iter().filter(|(&n, _)| n != 0).map(|(&n, &a)| (n, a))
    }

    pub fn side_count(&self) -> usize {
        self.side().count()
    }
}

/// Sums bins whose centers fall within ±`window_half_width` of each n·`period`.
pub fn integrate_peaks(hist: &CoincidenceHistogram, period: f64, window_half_width: f64) -> Result<PeakAreas> {
    if !(period > 0.0 && window_half_width > 0.0) {
        return Err(Error::Invalid("period and window must be positive".into()));
    }
    if window_half_width >= period / 2.0 {
        return Err(Error::Invalid(format!(
            "window ±{window_half_width} ps overlaps neighbours at period {period} ps"
        )));
    }
    let range = hist.range as f64;
    if period >= range {
        return Err(Error::Invalid(format!(
            "period {period} ps does not fit in range ±{range} ps"
        )));
    }
    let n_max = ((range - window_half_width) / period).floor() as i64;
    let mut areas = BTreeMap::new();
    let mut centroids = Vec::new();
    for n in -n_max..=n_max {
        let center = n as f64 * period;
        let (lo, hi) = (center - window_half_width, center + window_half_width);
        if lo < -range || hi > range {
            continue;
        }
        let first = ((lo + range) / hist.bin_width as f64 - 0.5).ceil().max(0.0) as usize;
        let mut sum = 0u64;
        let mut moment = 0.0;
        for i in first..hist.bins.len() {
            let c = hist.bin_center(i);
            if c > hi {
                break;
            }
            if c >= lo {
                sum += hist.bins[i];
                moment += hist.bins[i] as f64 * (c - center);
            }
        }
        areas.insert(n, sum);
        if sum > 0 {
            centroids.push((n as f64, moment / sum as f64, sum as f64));
        }
    }
    let warnings = period_drift_warning(&centroids, window_half_width)
        .into_iter()
        .collect();
    Ok(PeakAreas {
        period,
        window_half_width,
        areas,
        warnings,
    })
}

/// Flags a peak-centroid drift proportional to n, the signature of a wrong period.
fn period_drift_warning(centroids: &[(f64, f64, f64)], window: f64) -> Option<String> {
    if centroids.len() < 3 {
        return None;
    }
    let w: f64 = centroids.iter().map(|c| c.2).sum();
    let mx = centroids.iter().map(|c| c.2 * c.0).sum::<f64>() / w;
    let my = centroids.iter().map(|c| c.2 * c.1).sum::<f64>() / w;
    let sxx: f64 = centroids.iter().map(|c| c.2 * (c.0 - mx).powi(2)).sum();
    let sxy: f64 = centroids.iter().map(|c| c.2 * (c.0 - mx) * (c.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let n_max = centroids.iter().map(|c| c.0.abs()).fold(0.0, f64::max);
    if (slope * n_max).abs() > window / 4.0 {
        Some(format!(
            "peak centroids drift by {slope:.1} ps per period; the analysis period is likely mismatched"
        ))
    } else {
        None
    }
}

/// A value with its one-sigma standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub fn new(value: f64, error: f64) -> Self {
        Self { value, error }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, error: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct G2Result {
    pub g2: Estimate,
    pub zero_area: u64,
    pub side_mean: f64,
    pub side_peaks: usize,
}

/// g²(0) = A₀ / mean(A_{n≠0}) with Poisson errors propagated to first order.
pub fn g2_zero(areas: &PeakAreas) -> Result<G2Result> {
    let a0 = areas
        .zero()
        .ok_or_else(|| Error::Invalid("zero-delay peak window is incomplete".into()))?;
    let n = areas.side_count();
    if n == 0 {
        return Err(Error::Invalid("no side peaks in range".into()));
    }
    let side_sum: u64 = areas.side().map(|(_, a)| a).sum();
    if side_sum == 0 {
        return Err(Error::Division("all side peaks are empty"));
    }
    let g2 = ratio_estimate(a0 as f64, side_sum as f64, n as f64);
    Ok(G2Result {
        g2,
        zero_area: a0,
        side_mean: side_sum as f64 / n as f64,
        side_peaks: n,
    })
}

/// A₀/(S/N) with var(A₀) = A₀ and var(S) = S.
fn ratio_estimate(a0: f64, side_sum: f64, n: f64) -> Estimate {
    let mean = side_sum / n;
    let g = a0 / mean;
    let var = a0 / (mean * mean) + (g * g) * side_sum / (side_sum * side_sum);
    Estimate::new(g, var.sqrt())
}

/// V = 1 − g²∥/g²⊥, errors combined in quadrature.
pub fn hom_visibility(g2_parallel: Estimate, g2_perp: Estimate) -> Result<Estimate> {
    if g2_perp.value == 0.0 {
        return Err(Error::Division("distinguishable-case g2 is zero"));
    }
    let r = g2_parallel.value / g2_perp.value;
    let dp = g2_parallel.error / g2_perp.value;
    let dq = r * g2_perp.error / g2_perp.value;
    Ok(Estimate::new(1.0 - r, (dp * dp + dq * dq).sqrt()))
}

/// M_s = (V + g²)/(1 − g²), correcting the raw visibility for multiphoton events.
pub fn corrected_indistinguishability(v_hom: Estimate, g2: Estimate) -> Result<Estimate> {
    if !(g2.value < 1.0) {
        return Err(Error::Domain(format!("g2 = {} must be below 1", g2.value)));
    }
    let one_minus = 1.0 - g2.value;
    let m = (v_hom.value + g2.value) / one_minus;
    let dv = v_hom.error / one_minus;
    let dg = (1.0 + v_hom.value) * g2.error / (one_minus * one_minus);
    Ok(Estimate::new(m, (dv * dv + dg * dg).sqrt()))
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct HomResult {
    pub g2_parallel: Estimate,
    pub g2_perp: Estimate,
    pub v_hom: Estimate,
    pub m_s: Estimate,
}

impl HomResult {
    pub fn from_parts(g2_parallel: Estimate, g2_perp: Estimate, g2: Estimate) -> Result<Self> {
        let v_hom = hom_visibility(g2_parallel, g2_perp)?;
        let m_s = corrected_indistinguishability(v_hom, g2)?;
        Ok(Self {
            g2_parallel,
            g2_perp,
            v_hom,
            m_s,
        })
    }
}

/// (in − out)/out, treating the out-of-phase-matching rate as pure noise.
/// Returns `f64::INFINITY` when no noise is recorded.
pub fn snr_from_counts(rate_in_pm: f64, rate_out_pm: f64) -> Result<f64> {
    if !(rate_out_pm >= 0.0 && rate_in_pm >= 0.0) {
        return Err(Error::Invalid("rates must be non-negative".into()));
    }
    if rate_out_pm == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((rate_in_pm - rate_out_pm) / rate_out_pm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(bins: usize, c: u64, bw: u64) -> CoincidenceHistogram {
        let mut h = CoincidenceHistogram::new(bw, bins as u64 * bw / 2, (0, 1)).unwrap();
        h.bins.iter_mut().for_each(|b| *b = c);
        h
    }

    #[test]
    fn single_pair_lands_in_plus_5ns() {
        let h = cross_correlate(&[0], &[5000], 1000, 10_000).unwrap();
        assert_eq!(h.total(), 1);
        let i = h.bins.iter().position(|&c| c == 1).unwrap();
        assert_eq!(h.bin_start(i), 5000);
    }

    #[test]
    fn self_correlation_is_symmetric() {
        let ts: Vec<u64> = (0..500).map(|i| i * 7919 % 100_003 + i * 1000).collect();
        let mut ts = ts;
        ts.sort_unstable();
        let h = cross_correlate(&ts, &ts, 1, 20_000).unwrap();
        let zero = h.index(0).unwrap();
        assert_eq!(h.bins[zero], ts.len() as u64);
        // With 1 ps bins every delay owns a bin, so d and −d must match exactly.
        for k in 1..zero {
            assert_eq!(h.bins[zero - k], h.bins[zero + k], "k = {k}");
        }
    }

    #[test]
    fn rejects_unsorted_and_bad_binning() {
        assert!(cross_correlate(&[5, 3], &[1], 10, 100).is_err());
        assert!(cross_correlate(&[1], &[1], 30, 100).is_err());
        assert!(CoincidenceHistogram::new(0, 100, (0, 1)).is_err());
    }

    #[test]
    fn streaming_matches_slices_on_ties() {
        let a = [0u64, 100, 100, 250, 1000];
        let b = [100u64, 100, 150, 1000, 1099];
        let want = cross_correlate(&a, &b, 10, 200).unwrap();
        let mut tags: Vec<TimeTag> = a
            .iter()
            .map(|&t| TimeTag::new(t, 0))
            .chain(b.iter().map(|&t| TimeTag::new(t, 1)))
            .collect();
        tags.sort();
        let mut s = StreamingCorrelator::new(0, 1, 10, 200).unwrap();
        tags.iter().for_each(|&t| s.push(t).unwrap());
        assert_eq!(s.finish().bins, want.bins);
    }

    #[test]
    fn flat_histogram_peaks() {
        let h = flat(400, 7, 100);
        let areas = integrate_peaks(&h, 2000.0, 300.0).unwrap();
        assert!(areas.areas.values().all(|&a| a == 7 * 6));
        assert!(areas.warnings.is_empty());
    }

    #[test]
    fn delta_at_plus_one_period() {
        let mut h = CoincidenceHistogram::new(100, 20_000, (0, 1)).unwrap();
        let i = h.index(2000).unwrap();
        h.bins[i] = 13;
        let areas = integrate_peaks(&h, 2000.0, 300.0).unwrap();
        for (&n, &a) in &areas.areas {
            assert_eq!(a, if n == 1 { 13 } else { 0 });
        }
    }

    #[test]
    fn partial_edge_windows_are_dropped() {
        let h = flat(200, 1, 100); // ±10 ns
        let areas = integrate_peaks(&h, 3000.0, 1000.0).unwrap();
        let keys: Vec<i64> = areas.areas.keys().copied().collect();
        assert_eq!(keys, vec![-3, -2, -1, 0, 1, 2, 3]);
    }

    #[test]
    fn overlapping_windows_rejected() {
        let h = flat(200, 1, 100);
        assert!(integrate_peaks(&h, 2000.0, 1000.0).is_err());
        assert!(integrate_peaks(&h, 20_000.0, 1000.0).is_err());
    }

    fn areas(a0: u64, side: &[u64]) -> PeakAreas {
        let mut m = BTreeMap::new();
        m.insert(0, a0);
        for (k, &a) in side.iter().enumerate() {
            let n = k as i64 / 2 + 1;
            m.insert(if k % 2 == 0 { n } else { -n }, a);
        }
        PeakAreas {
            period: 1.0,
            window_half_width: 0.1,
            areas: m,
            warnings: vec![],
        }
    }

    #[test]
    fn g2_examples() {
        // 44 over twenty side peaks of 1000 = 0.044 (the areas scale the example by 10).
        let r = g2_zero(&areas(44, &[1000; 20])).unwrap();
        assert!((r.g2.value - 0.044).abs() < 1e-12);
        let expected_err = 0.044 * (1.0 / 44.0 + 1.0 / 20_000.0f64).sqrt();
        assert!((r.g2.error - expected_err).abs() < 1e-12);
        assert_eq!(g2_zero(&areas(0, &[100; 4])).unwrap().g2.value, 0.0);
        assert_eq!(g2_zero(&areas(100, &[100; 4])).unwrap().g2.value, 1.0);
        assert!(matches!(g2_zero(&areas(3, &[0; 4])), Err(Error::Division(_))));
    }

    #[test]
    fn g2_value_from_fractional_side_mean() {
        // The value definition holds for fractional areas too: 4.4 / 100.
        let g = ratio_estimate(4.4, 2000.0, 20.0);
        assert!((g.value - 0.044).abs() < 1e-12);
    }

    #[test]
    fn visibility_examples() {
        let v = hom_visibility(Estimate::exact(0.143), Estimate::exact(0.5)).unwrap();
        assert!((v.value - 0.714).abs() < 1e-12);
        assert_eq!(hom_visibility(Estimate::exact(0.3), Estimate::exact(0.3)).unwrap().value, 0.0);
        assert_eq!(hom_visibility(Estimate::exact(0.0), Estimate::exact(0.3)).unwrap().value, 1.0);
        assert!(hom_visibility(Estimate::exact(0.1), Estimate::exact(0.0)).is_err());
        let e = hom_visibility(Estimate::new(0.1, 0.01), Estimate::new(0.5, 0.02)).unwrap();
        let want = ((0.01f64 / 0.5).powi(2) + (0.2f64 * 0.02 / 0.5).powi(2)).sqrt();
        assert!((e.error - want).abs() < 1e-15);
    }

    #[test]
    fn corrected_indistinguishability_examples() {
        let nir = corrected_indistinguishability(Estimate::exact(0.714), Estimate::exact(0.044)).unwrap();
        assert!((nir.value - 0.7929).abs() < 5e-5, "{}", nir.value);
        let tel = corrected_indistinguishability(Estimate::exact(0.708), Estimate::exact(0.051)).unwrap();
        assert!((tel.value - 0.7998).abs() < 5e-5, "{}", tel.value);
        let v = corrected_indistinguishability(Estimate::exact(0.6), Estimate::exact(0.0)).unwrap();
        assert_eq!(v.value, 0.6);
        assert!(corrected_indistinguishability(Estimate::exact(0.6), Estimate::exact(1.0)).is_err());
    }

    #[test]
    fn corrected_error_matches_finite_differences() {
        let (v, g, sv, sg) = (0.714, 0.044, 0.003, 0.001);
        let m = |v: f64, g: f64| (v + g) / (1.0 - g);
        let h = 1e-6;
        let dv = (m(v + h, g) - m(v - h, g)) / (2.0 * h);
        let dg = (m(v, g + h) - m(v, g - h)) / (2.0 * h);
        let want = ((dv * sv).powi(2) + (dg * sg).powi(2)).sqrt();
        let got = corrected_indistinguishability(Estimate::new(v, sv), Estimate::new(g, sg)).unwrap();
        assert!((got.error - want).abs() < 1e-9);
    }

    #[test]
    fn snr_examples() {
        assert_eq!(snr_from_counts(401.0 * 17.0, 17.0).unwrap(), 400.0);
        assert_eq!(snr_from_counts(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(snr_from_counts(5.0, 0.0).unwrap(), f64::INFINITY);
        assert!(snr_from_counts(5.0, -1.0).is_err());
    }
}
