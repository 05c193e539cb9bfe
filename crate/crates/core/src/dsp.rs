//! Preprocessing from raw signals to model-ready windows.
//!
//! The fixed pipeline is bandpass (0.5-8 Hz, zero phase) -> resample onto the
//! 32 Hz grid -> cut 25 s windows -> normalize each window to `[0, 1]`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{RhythmClass, Signal};

pub const WINDOW_LEN: usize = 800;
pub const GRID_FS: f64 = 32.0;
pub const WINDOW_S: f64 = 25.0;
pub const TRAIN_STRIDE_S: f64 = 12.5;
pub const EVAL_STRIDE_S: f64 = 25.0;
pub const BAND_LO: f64 = 0.5;
pub const BAND_HI: f64 = 8.0;
pub const PEAK_PERCENTILE: f64 = 0.60;
pub const REFRACTORY_S: f64 = 0.27;
/// Minimum peak prominence as a fraction of the signal's range.
pub const MIN_PROMINENCE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QaClass {
    Excellent,
    Acceptable,
    Poor,
}

impl QaClass {
    pub const ALL: [QaClass; 3] = [QaClass::Excellent, QaClass::Acceptable, QaClass::Poor];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QaClass::Excellent => "excellent",
            QaClass::Acceptable => "acceptable",
            QaClass::Poor => "poor",
        }
    }

    /// "noise" is accepted as a synonym of poor.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "excellent" => Some(QaClass::Excellent),
            "acceptable" => Some(QaClass::Acceptable),
            "poor" | "noise" => Some(QaClass::Poor),
            _ => None,
        }
    }
}

/// A 25 s, 800-sample, `[0, 1]`-normalized segment on the 32 Hz grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub samples: Vec<f32>,
    pub fs_effective: f64,
    pub rhythm: Option<RhythmClass>,
    pub qa: Option<QaClass>,
    pub subject_id: String,
    pub origin: (String, usize),
}

impl Window {
    /// Wrap already-normalized samples, checking the window invariants.
    pub fn new(samples: Vec<f32>, subject_id: impl Into<String>) -> Result<Self> {
        let w = Self {
            samples,
            fs_effective: GRID_FS,
            rhythm: None,
            qa: None,
            subject_id: subject_id.into(),
            origin: (String::new(), 0),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != WINDOW_LEN {
            return Err(Error::Shape(format!(
                "window must hold {WINDOW_LEN} samples, got {}",
                self.samples.len()
            )));
        }
        if let Some(i) = self.samples.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "window sample {i} = {} outside [0, 1]",
                self.samples[i]
            )));
        }
        Ok(())
    }

    pub fn with_labels(mut self, rhythm: Option<RhythmClass>, qa: Option<QaClass>) -> Self {
        self.rhythm = rhythm;
        self.qa = qa;
        self
    }

    /// `"<source>:<start sample>"`, unique within a dataset.
    pub fn id(&self) -> String {
        format!("{}:{}", self.origin.0, self.origin.1)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| v as f64).collect()
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Domain(format!("non-finite sample at index {i}"))),
        None => Ok(()),
    }
}

/// Min-max scaling to `[0, 1]`; a constant input maps to all zeros.
pub fn normalize01(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Domain("cannot normalize an empty array".into()));
    }
    check_finite(x)?;
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Ok(vec![0.0; x.len()]);
    }
    let span = hi - lo;
    Ok(x.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect())
}

/// Second-order section `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// Transposed direct-form II state for a unit step held forever.
    fn step_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        let s2 = self.b[2] - self.a[2] * y;
        let s1 = self.b[1] - self.a[1] * y + s2;
        [s1, s2]
    }

    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (self.a[0] + self.a[1] * z1 + self.a[2] * z2)
    }
}

/// Butterworth bandpass of prototype order 2 as two biquads
/// (bilinear transform with frequency prewarping).
pub fn butter_bandpass(lo: f64, hi: f64, fs: f64) -> Result<Vec<Biquad>> {
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::Config(format!(
            "band {lo}-{hi} Hz must satisfy 0 < lo < hi < fs/2 = {}",
            fs / 2.0
        )));
    }
    let k = 2.0 * fs;
    let w_lo = k * (PI * lo / fs).tan();
    let w_hi = k * (PI * hi / fs).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // Order-2 lowpass prototype pole in the upper half plane; its conjugate
    // yields the conjugate pair of each bandpass section.
    let proto = Complex64::from_polar(1.0, 3.0 * PI / 4.0);
    let half = proto * (bw / 2.0);
    let root = (half * half - w0_sq).sqrt();
    let mut sections = Vec::with_capacity(2);
    for s_pole in [half + root, half - root] {
        let z = (k + s_pole) / (k - s_pole);
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * z.re, z.norm_sqr()],
        });
    }
    let w_center = 2.0 * (w0_sq.sqrt() / k).atan();
    let gain: Complex64 = sections.iter().map(|s| s.response(w_center)).product();
    let g = gain.norm().recip().sqrt();
    for s in &mut sections {
        for b in &mut s.b {
            *b *= g;
        }
    }
    Ok(sections)
}

fn sos_filter(sections: &[Biquad], x: &[f64], x0: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    let mut level = x0;
    for s in sections {
        let [z1, z2] = s.step_state();
        let (mut s1, mut s2) = (z1 * level, z2 * level);
        for v in y.iter_mut() {
            let input = *v;
            let out = s.b[0] * input + s1;
            s1 = s.b[1] * input - s.a[1] * out + s2;
            s2 = s.b[2] * input - s.a[2] * out;
            *v = out;
        }
        level *= s.dc_gain();
    }
    y
}

/// Forward-backward filtering with odd extension at both ends and
/// steady-state initial conditions.
pub fn filtfilt(sections: &[Biquad], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let fwd = sos_filter(sections, &ext, ext[0]);
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    let start = rev[0];
    rev = sos_filter(sections, &rev, start);
    rev.reverse();
    rev[pad..pad + n].to_vec()
}

/// Zero-phase Butterworth bandpass; same length and sample rate.
pub fn bandpass(x: &Signal, lo: f64, hi: f64) -> Result<Signal> {
    x.validate()?;
    let sections = butter_bandpass(lo, hi, x.fs)?;
    let padlen = (x.fs / lo).ceil() as usize;
    Ok(Signal {
        samples: filtfilt(&sections, &x.samples, padlen),
        fs: x.fs,
        meta: x.meta.clone(),
    })
}

/// Move a band-limited signal onto the `target_fs` grid: plain decimation
/// for integer ratios, linear interpolation otherwise.
pub fn resample_to_grid(x: &Signal, target_fs: f64) -> Result<Signal> {
    x.validate()?;
    if !(target_fs > 0.0) || target_fs >= x.fs {
        return Err(Error::Config(format!(
            "target rate {target_fs} Hz must be positive and below the source rate {} Hz",
            x.fs
        )));
    }
    let ratio = x.fs / target_fs;
    let n = x.samples.len();
    let samples = if (ratio - ratio.round()).abs() < 1e-9 {
        let step = ratio.round() as usize;
        x.samples.iter().step_by(step).cloned().collect()
    } else {
        let n_out = ((n as f64) * target_fs / x.fs).round().max(1.0) as usize;
        (0..n_out)
            .map(|k| {
                let pos = k as f64 * ratio;
                let i = (pos.floor() as usize).min(n - 1);
                let frac = pos - i as f64;
                if i + 1 < n {
                    x.samples[i] * (1.0 - frac) + x.samples[i + 1] * frac
                } else {
                    x.samples[n - 1]
                }
            })
            .collect()
    };
    Ok(Signal {
        samples,
        fs: target_fs,
        meta: x.meta.clone(),
    })
}

/// Cut `window_s` segments every `stride_s` seconds and normalize each.
/// A trailing partial segment is dropped; a short signal yields no windows.
pub fn segment_windows(x: &Signal, window_s: f64, stride_s: f64) -> Result<Vec<Window>> {
    x.validate()?;
    if !(stride_s > 0.0) {
        return Err(Error::Config(format!("stride must be positive, got {stride_s}")));
    }
    let len = (window_s * x.fs).round() as usize;
    let stride = ((stride_s * x.fs).round() as usize).max(1);
    if len != WINDOW_LEN {
        return Err(Error::Config(format!(
            "{window_s} s at {} Hz gives {len} samples, windows need {WINDOW_LEN}",
            x.fs
        )));
    }
    let n = x.samples.len();
    if n < len {
        return Ok(Vec::new());
    }
    let (subject, rhythm) = match &x.meta {
        Some(m) => (m.subject_id.clone(), Some(m.rhythm)),
        None => (String::new(), None),
    };
    let mut out = Vec::with_capacity((n - len) / stride + 1);
    let mut start = 0;
    while start + len <= n {
        let norm = normalize01(&x.samples[start..start + len])?;
        let mut w = Window::new(norm.iter().map(|&v| v as f32).collect(), subject.clone())?;
        w.rhythm = rhythm;
        w.origin = (subject.clone(), start);
        out.push(w);
        start += stride;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub band_lo: f64,
    pub band_hi: f64,
    pub target_fs: f64,
    pub window_s: f64,
    pub stride_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_lo: BAND_LO,
            band_hi: BAND_HI,
            target_fs: GRID_FS,
            window_s: WINDOW_S,
            stride_s: EVAL_STRIDE_S,
        }
    }
}

/// bandpass -> resample -> segment -> normalize.
pub fn preprocess(x: &Signal, cfg: &PreprocessConfig) -> Result<Vec<Window>> {
    let filtered = bandpass(x, cfg.band_lo, cfg.band_hi)?;
    let grid = resample_to_grid(&filtered, cfg.target_fs)?;
    segment_windows(&grid, cfg.window_s, cfg.stride_s)
}

/// Height of a peak above the higher of its two bases, where each base is
/// the lowest sample between the peak and the nearest taller sample.
fn prominence(x: &[f64], i: usize) -> f64 {
    let mut left = x[i];
    for j in (0..i).rev() {
        if x[j] > x[i] {
            break;
        }
        left = left.min(x[j]);
    }
    let mut right = x[i];
    for &v in &x[i + 1..] {
        if v > x[i] {
            break;
        }
        right = right.min(v);
    }
    x[i] - left.max(right)
}

/// Local maxima above the 60th percentile with a prominence of at least a
/// fifth of the signal range, at least 0.27 s apart. Taller peaks win when
/// two candidates fall inside one refractory period.
pub fn detect_peaks(x: &[f64], fs: f64) -> Vec<usize> {
    let n = x.len();
    if n < 3 {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[((n - 1) as f64 * PEAK_PERCENTILE).round() as usize];
    let min_prominence = MIN_PROMINENCE * (sorted[n - 1] - sorted[0]);

    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] > threshold)
        .filter(|&i| prominence(x, i) >= min_prominence)
        .collect();
    candidates.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));

    let refractory = (REFRACTORY_S * fs).ceil() as usize;
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&p| p.abs_diff(c) >= refractory) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    accepted
}

/// Savitzky-Golay edge treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SavgolEdge {
    /// Fit the polynomial to the first/last full window and evaluate it at
    /// the edge positions. Reproduces polynomials up to `order` everywhere.
    #[default]
    Interp,
    /// Reflect about the end samples (`x[-k] = x[k]`).
    Mirror,
}

/// Solve a small dense system by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Weights `h` such that `sum h[i] * x[i]` is the least-squares polynomial of
/// degree `order` through `window_len` points, evaluated at `pos` (offset
/// from the window center, in samples).
pub fn savgol_coeffs(window_len: usize, order: usize, pos: f64) -> Result<Vec<f64>> {
    if window_len % 2 == 0 || window_len <= order {
        return Err(Error::Config(format!(
            "Savitzky-Golay window {window_len} must be odd and greater than order {order}"
        )));
    }
    let half = (window_len / 2) as f64;
    let scale = half.max(1.0);
    let p = order + 1;
    let positions: Vec<f64> = (0..window_len).map(|i| (i as f64 - half) / scale).collect();
    let mut ata = vec![vec![0.0; p]; p];
    for &t in &positions {
        for r in 0..p {
            for c in 0..p {
                ata[r][c] += t.powi((r + c) as i32);
            }
        }
    }
    let v: Vec<f64> = (0..p).map(|j| (pos / scale).powi(j as i32)).collect();
    let g = solve(ata, v);
    Ok(positions
        .iter()
        .map(|&t| (0..p).map(|j| g[j] * t.powi(j as i32)).sum())
        .collect())
}

pub fn savgol_smooth(x: &[f64], window_len: usize, order: usize) -> Result<Vec<f64>> {
    savgol_smooth_with(x, window_len, order, SavgolEdge::Interp)
}

pub fn savgol_smooth_with(x: &[f64], window_len: usize, order: usize, edge: SavgolEdge) -> Result<Vec<f64>> {
    let center = savgol_coeffs(window_len, order, 0.0)?;
    check_finite(x)?;
    let n = x.len();
    let half = window_len / 2;
    if n < window_len {
        return Err(Error::Config(format!(
            "signal of {n} samples is shorter than the Savitzky-Golay window {window_len}"
        )));
    }
    let mut out = vec![0.0; n];
    for i in half..n - half {
        out[i] = center.iter().zip(&x[i - half..=i + half]).map(|(h, v)| h * v).sum();
    }
    match edge {
        SavgolEdge::Interp => {
            for i in 0..half {
                let h = savgol_coeffs(window_len, order, i as f64 - half as f64)?;
                out[i] = h.iter().zip(&x[..window_len]).map(|(h, v)| h * v).sum();
                let h = savgol_coeffs(window_len, order, half as f64 - i as f64)?;
                out[n - 1 - i] = h.iter().zip(&x[n - window_len..]).map(|(h, v)| h * v).sum();
            }
        }
        SavgolEdge::Mirror => {
            let at = |j: isize| -> f64 {
                let m = n as isize - 1;
                let k = if j < 0 { -j } else if j > m { 2 * m - j } else { j };
                x[k.clamp(0, m) as usize]
            };
            for i in (0..half).chain(n - half..n) {
                out[i] = center
                    .iter()
                    .enumerate()
                    .map(|(k, h)| h * at(i as isize + k as isize - half as isize))
                    .sum();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{self, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sine(freq: f64, fs: f64, seconds: f64, amp: f64) -> Signal {
        let n = (fs * seconds).round() as usize;
        let s = (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect();
        Signal::new(s, fs).unwrap()
    }

    /// Single-bin DFT amplitude over the middle of a signal.
    fn tone_amplitude(x: &[f64], freq: f64, fs: f64) -> f64 {
        let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| {
            let ph = 2.0 * PI * freq * i as f64 / fs;
            (re + v * ph.cos(), im - v * ph.sin())
        });
        2.0 * (re * re + im * im).sqrt() / x.len() as f64
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize01(&[0.0, 2.0, 4.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize01(&[5.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(matches!(normalize01(&[1.0, f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(normalize01(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn bandpass_removes_dc_offset() {
        let base = sine(2.0, 128.0, 25.0, 1.0);
        let mut shifted = base.clone();
        shifted.samples.iter_mut().for_each(|v| *v += 1.0);
        let a = bandpass(&base, BAND_LO, BAND_HI).unwrap();
        let b = bandpass(&shifted, BAND_LO, BAND_HI).unwrap();
        let mean_diff: f64 =
            a.samples.iter().zip(&b.samples).map(|(x, y)| (y - x).abs()).sum::<f64>() / a.samples.len() as f64;
        assert!(mean_diff < 0.01, "{mean_diff}");
    }

    #[test]
    fn passband_and_stopband_amplitudes() {
        // Integer number of cycles in 25 s so the single-bin DFT is exact.
        let pass = bandpass(&sine(2.0, 128.0, 25.0, 1.0), BAND_LO, BAND_HI).unwrap();
        let amp = tone_amplitude(&pass.samples, 2.0, 128.0);
        assert!((amp - 1.0).abs() < 0.05, "{amp}");
        let stop = bandpass(&sine(30.0, 128.0, 25.0, 1.0), BAND_LO, BAND_HI).unwrap();
        let amp = tone_amplitude(&stop.samples, 30.0, 128.0);
        assert!(amp < 0.1, "{amp}");
    }

    #[test]
    fn band_outside_nyquist_is_rejected() {
        let s = sine(1.0, 32.0, 30.0, 1.0);
        assert!(matches!(bandpass(&s, 0.5, 16.0), Err(Error::Config(_))));
        assert!(matches!(bandpass(&s, 2.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(bandpass(&s, 0.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn bandpass_is_zero_phase() {
        let x = sine(2.0, 128.0, 25.0, 1.0);
        let y = bandpass(&x, BAND_LO, BAND_HI).unwrap();
        let n = x.samples.len();
        let xcorr = |lag: isize| -> f64 {
            (0..n as isize)
                .filter_map(|i| {
                    let j = i + lag;
                    (j >= 0 && j < n as isize).then(|| x.samples[i as usize] * y.samples[j as usize])
                })
                .sum()
        };
        let best = (-20..=20).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn resample_lengths_and_constant() {
        let s = Signal::new(vec![0.25; 3200], 128.0).unwrap();
        let r = resample_to_grid(&s, GRID_FS).unwrap();
        assert_eq!(r.samples.len(), 800);
        assert_eq!(r.fs, 32.0);
        assert!(r.samples.iter().all(|&v| v == 0.25));

        let s = Signal::new(vec![-3.0; 3125], 125.0).unwrap();
        let r = resample_to_grid(&s, GRID_FS).unwrap();
        assert_eq!(r.samples.len(), 800);
        assert!(r.samples.iter().all(|&v| (v + 3.0).abs() < 1e-12));

        assert!(matches!(resample_to_grid(&r, 32.0), Err(Error::Config(_))));
    }

    #[test]
    fn resample_125_hz_tracks_analytic_sine() {
        let f = 1.3;
        let src = sine(f, 125.0, 25.0, 1.0);
        let r = resample_to_grid(&src, GRID_FS).unwrap();
        assert_eq!(r.samples.len(), 800);
        for (k, &v) in r.samples.iter().enumerate() {
            let truth = (2.0 * PI * f * k as f64 / GRID_FS).sin();
            // Linear interpolation error <= h^2/8 * max|x''|.
            let bound = (1.0 / 125.0f64).powi(2) / 8.0 * (2.0 * PI * f).powi(2) + 1e-12;
            assert!((v - truth).abs() <= bound, "k={k}");
        }
    }

    #[test]
    fn window_counts() {
        let s = |secs: f64| Signal::new(vec![1.0; (secs * 32.0) as usize], 32.0).unwrap();
        assert_eq!(segment_windows(&s(50.0), 25.0, 25.0).unwrap().len(), 2);
        assert_eq!(segment_windows(&s(50.0), 25.0, 12.5).unwrap().len(), 3);
        assert_eq!(segment_windows(&s(24.0), 25.0, 25.0).unwrap().len(), 0);
    }

    #[test]
    fn emitted_windows_satisfy_invariants() {
        let cfg = SimConfig { duration_s: 60.0, bw_amp: 0.2, am_depth: 0.1, ..SimConfig::default() };
        let sig = sim::simulate(&cfg).unwrap();
        let ws = preprocess(&sig, &PreprocessConfig { stride_s: TRAIN_STRIDE_S, ..Default::default() }).unwrap();
        assert_eq!(ws.len(), 3);
        for w in &ws {
            w.validate().unwrap();
            let lo = w.samples.iter().cloned().fold(f32::MAX, f32::min);
            let hi = w.samples.iter().cloned().fold(f32::MIN, f32::max);
            assert!(lo.abs() < 1e-9 && (hi - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn post_filter_stages_are_idempotent() {
        let sig = sim::simulate(&SimConfig::default()).unwrap();
        let w = &preprocess(&sig, &PreprocessConfig::default()).unwrap()[0];
        let grid = Signal::new(w.as_f64(), GRID_FS).unwrap();
        let again = segment_windows(&grid, WINDOW_S, EVAL_STRIDE_S).unwrap();
        assert_eq!(again.len(), 1);
        for (a, b) in again[0].samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn peaks_of_one_hertz_sine() {
        let x = sine(1.0, 32.0, 10.0, 1.0);
        let p = detect_peaks(&x.samples, 32.0);
        assert_eq!(p, (0..10).map(|k| 8 + 32 * k).collect::<Vec<_>>());
        assert!(detect_peaks(&[2.0; 100], 32.0).is_empty());
        assert!(detect_peaks(&[1.0, 2.0], 32.0).is_empty());
    }

    #[test]
    fn peaks_match_simulated_beats() {
        let cfg = SimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rr = sim::gen_rr(&cfg, &mut rng).unwrap();
        let sig = sim::synth_ppg(&rr, &cfg).unwrap();
        let w = &preprocess(&sig, &PreprocessConfig::default()).unwrap()[0];
        let n = detect_peaks(&w.as_f64(), GRID_FS).len();
        assert!(n.abs_diff(rr.len()) <= 1, "{n} peaks vs {} beats", rr.len());
        // Raw 128 Hz trace as well.
        let n = detect_peaks(&sig.samples, 128.0).len();
        assert!(n.abs_diff(rr.len()) <= 1, "{n} peaks vs {} beats", rr.len());
    }

    #[test]
    fn savgol_reproduces_cubics() {
        let x: Vec<f64> = (0..200)
            .map(|i| {
                let t = i as f64 / 10.0 - 7.0;
                0.5 - 1.5 * t + 0.25 * t * t - 0.03 * t * t * t
            })
            .collect();
        for w in [5, 7, 15, 31] {
            let y = savgol_smooth(&x, w, 3).unwrap();
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-9, "window {w}");
            }
        }
    }

    #[test]
    fn savgol_known_five_point_kernel() {
        // Tabulated 5-point quadratic/cubic smoothing weights (-3, 12, 17, 12, -3) / 35.
        let y = savgol_smooth(&[0.0, 0.0, 1.0, 0.0, 0.0], 5, 3).unwrap();
        assert!((y[2] - 17.0 / 35.0).abs() < 1e-12);
        let h = savgol_coeffs(5, 3, 0.0).unwrap();
        for (a, b) in h.iter().zip([-3.0, 12.0, 17.0, 12.0, -3.0]) {
            assert!((a - b / 35.0).abs() < 1e-12);
        }
    }

    #[test]
    fn savgol_reduces_white_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        for edge in [SavgolEdge::Interp, SavgolEdge::Mirror] {
            let y = savgol_smooth_with(&x, 15, 3, edge).unwrap();
            assert!(var(&y) < var(&x));
        }
    }

    #[test]
    fn savgol_rejects_bad_windows() {
        let x = vec![0.0; 50];
        assert!(matches!(savgol_smooth(&x, 6, 3), Err(Error::Config(_))));
        assert!(matches!(savgol_smooth(&x, 3, 3), Err(Error::Config(_))));
    }
}
