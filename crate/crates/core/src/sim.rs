//! Labeled synthetic PPG: RR-interval generation, a two-Gaussian pulse
//! template, baseline wander, amplitude modulation and Gaussian corruption.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::QaClass;
use crate::error::{Error, Result};

/// Default corruption grid: the union of the two factor lists used for the
/// simulated corpus.
pub const DEFAULT_NOISE_FACTORS: [f64; 8] = [0.001, 0.15, 0.25, 0.5, 0.75, 1.0, 2.0, 5.0];

/// Factor list as printed with the corpus description.
pub const METHODS_NOISE_FACTORS: [f64; 7] = [0.001, 0.5, 0.25, 0.75, 1.0, 2.0, 5.0];

/// Factor list as printed with the example figure.
pub const FIGURE_NOISE_FACTORS: [f64; 7] = [0.001, 0.15, 0.5, 0.75, 1.0, 2.0, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RhythmClass {
    Sinus,
    #[serde(rename = "AF")]
    Af,
}

impl RhythmClass {
    pub fn index(self) -> usize {
        match self {
            RhythmClass::Sinus => 0,
            RhythmClass::Af => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(RhythmClass::Sinus),
            1 => Some(RhythmClass::Af),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RhythmClass::Sinus => "sinus",
            RhythmClass::Af => "af",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sinus" | "nsr" | "0" => Some(RhythmClass::Sinus),
            "af" | "afib" | "1" => Some(RhythmClass::Af),
            _ => None,
        }
    }
}

/// Per-beat pulse shape: a systolic Gaussian and a dicrotic Gaussian placed
/// at fractions of the RR interval, with widths also relative to RR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseTemplate {
    pub systolic_pos: f64,
    pub systolic_amp: f64,
    pub systolic_width: f64,
    pub dicrotic_pos: f64,
    pub dicrotic_amp: f64,
    pub dicrotic_width: f64,
}

impl Default for PulseTemplate {
    fn default() -> Self {
        Self {
            systolic_pos: 0.30,
            systolic_amp: 1.0,
            systolic_width: 0.10,
            dicrotic_pos: 0.65,
            dicrotic_amp: 0.35,
            dicrotic_width: 0.15,
        }
    }
}

impl PulseTemplate {
    fn raw(&self, phase: f64) -> f64 {
        let g = |pos: f64, amp: f64, width: f64| {
            let d = (phase - pos) / width;
            amp * (-0.5 * d * d).exp()
        };
        g(self.systolic_pos, self.systolic_amp, self.systolic_width)
            + g(self.dicrotic_pos, self.dicrotic_amp, self.dicrotic_width)
    }

    /// Template value at `phase` in `[0, 1]`. A linear ramp through the two
    /// endpoint values is removed so consecutive beats join continuously.
    pub fn eval(&self, phase: f64) -> f64 {
        let g0 = self.raw(0.0);
        let g1 = self.raw(1.0);
        self.raw(phase) - (g0 + (g1 - g0) * phase)
    }

    /// Largest absolute template value over one beat.
    pub fn peak(&self) -> f64 {
        (0..=4096)
            .map(|i| self.eval(i as f64 / 4096.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub bpm: f64,
    pub duration_s: f64,
    pub fs: f64,
    pub rhythm: RhythmClass,
    pub bw_amp: f64,
    pub bw_freq: f64,
    pub am_depth: f64,
    pub am_freq: f64,
    /// AF: coefficient of variation of the RR intervals. Sinus: depth of
    /// the respiratory sinusoidal RR modulation (0 disables it).
    pub fm_cv: f64,
    pub rsa_freq: f64,
    pub noise_factor: f64,
    pub seed: u64,
    pub template: PulseTemplate,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            bpm: 60.0,
            duration_s: 25.0,
            fs: 128.0,
            rhythm: RhythmClass::Sinus,
            bw_amp: 0.0,
            bw_freq: 0.2,
            am_depth: 0.0,
            am_freq: 0.25,
            fm_cv: 0.05,
            rsa_freq: 0.25,
            noise_factor: 0.0,
            seed: 0,
            template: PulseTemplate::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(30.0..=220.0).contains(&self.bpm) {
            return bad(format!("bpm {} outside [30, 220]", self.bpm));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return bad(format!("fs must be positive, got {}", self.fs));
        }
        if self.noise_factor < 0.0 || !self.noise_factor.is_finite() {
            return bad(format!("noise_factor must be >= 0, got {}", self.noise_factor));
        }
        if self.fm_cv < 0.0 || !self.fm_cv.is_finite() {
            return bad(format!("fm_cv must be >= 0, got {}", self.fm_cv));
        }
        if self.bw_amp < 0.0 || self.am_depth < 0.0 {
            return bad("bw_amp and am_depth must be >= 0".into());
        }
        match self.rhythm {
            RhythmClass::Af => {
                if self.fm_cv <= 0.0 {
                    return bad("AF rhythm requires fm_cv > 0".into());
                }
                // u_i is uniform on +-sqrt(3)*cv; intervals must stay positive.
                if 3f64.sqrt() * self.fm_cv >= 1.0 {
                    return bad(format!("fm_cv {} too large for positive RR intervals", self.fm_cv));
                }
            }
            RhythmClass::Sinus => {
                if self.fm_cv >= 1.0 {
                    return bad(format!("sinus modulation depth {} must be < 1", self.fm_cv));
                }
            }
        }
        // Beat harmonics: the template Gaussians carry energy up to roughly
        // 1 / (2*pi*width*RR) Hz; keep three of those below Nyquist.
        let min_rr = 60.0 / self.bpm * (1.0 - 3f64.sqrt() * self.fm_cv).max(0.05);
        let width = self.template.systolic_width.min(self.template.dicrotic_width);
        let top = (3.0 / (2.0 * PI * width * min_rr))
            .max(self.bw_freq)
            .max(self.am_freq)
            .max(self.rsa_freq);
        if self.fs <= 2.0 * top {
            return bad(format!("fs {} Hz must exceed twice the highest simulated frequency {top:.2} Hz", self.fs));
        }
        Ok(())
    }

    pub fn base_period(&self) -> f64 {
        60.0 / self.bpm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalMeta {
    pub subject_id: String,
    pub rhythm: RhythmClass,
    pub noise_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub meta: Option<SignalMeta>,
}

impl Signal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        let s = Self { samples, fs, meta: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Domain("signal has no samples".into()));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Domain(format!("invalid sample rate {}", self.fs)));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn with_meta(mut self, meta: SignalMeta) -> Self {
        self.meta = Some(meta);
        self
    }
}

/// RR intervals in seconds whose cumulative sum reaches `duration_s`.
pub fn gen_rr<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<Vec<f64>> {
    config.validate()?;
    let base = config.base_period();
    let mut rr = Vec::with_capacity((config.duration_s / base) as usize + 2);
    let mut t = 0.0;
    while t < config.duration_s {
        let interval = match config.rhythm {
            RhythmClass::Sinus => base * (1.0 + config.fm_cv * (2.0 * PI * config.rsa_freq * t).sin()),
            RhythmClass::Af => {
                let half = 3f64.sqrt() * config.fm_cv;
                base * (1.0 + rng.random_range(-half..=half))
            }
        };
        rr.push(interval);
        t += interval;
    }
    Ok(rr)
}

/// Render a pulse train from `rr` and apply amplitude modulation and
/// baseline wander. Output length is `round(duration_s * fs)`.
pub fn synth_ppg(rr: &[f64], config: &SimConfig) -> Result<Signal> {
    if rr.is_empty() {
        return Err(Error::Domain("empty RR sequence".into()));
    }
    if let Some(bad) = rr.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("non-positive RR interval {bad}")));
    }
    let n = (config.duration_s * config.fs).round() as usize;
    if n == 0 {
        return Err(Error::Config("duration_s * fs rounds to zero samples".into()));
    }
    let tpl = &config.template;
    let peak = tpl.peak();
    let mut samples = vec![0.0; n];

    let mut onset = 0.0;
    let mut beat = 0usize;
    let beat_amp = |onset: f64, rr: f64| {
        let t_sys = onset + tpl.systolic_pos * rr;
        1.0 + config.am_depth * (2.0 * PI * config.am_freq * t_sys).sin()
    };
    let mut amp = beat_amp(onset, rr[0]);
    for (i, out) in samples.iter_mut().enumerate() {
        let t = i as f64 / config.fs;
        // Past the supplied intervals the last one repeats.
        let mut len = rr[beat.min(rr.len() - 1)];
        while t >= onset + len {
            onset += len;
            beat += 1;
            len = rr[beat.min(rr.len() - 1)];
            amp = beat_amp(onset, len);
        }
        let phase = (t - onset) / len;
        let wander = config.bw_amp * peak * (2.0 * PI * config.bw_freq * t).sin();
        *out = amp * tpl.eval(phase) + wander;
    }
    Signal::new(samples, config.fs)
}

/// `x + noise_factor * std(x) * N(0, 1)` per sample.
pub fn corrupt<R: Rng + ?Sized>(x: &Signal, noise_factor: f64, rng: &mut R) -> Result<Signal> {
    x.validate()?;
    if !(noise_factor >= 0.0 && noise_factor.is_finite()) {
        return Err(Error::Domain(format!("noise factor must be >= 0, got {noise_factor}")));
    }
    if noise_factor == 0.0 {
        return Ok(x.clone());
    }
    let sd = sample_std(&x.samples);
    let scale = noise_factor * sd;
    let samples = x
        .samples
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + scale * z
        })
        .collect();
    Ok(Signal {
        samples,
        fs: x.fs,
        meta: x.meta.clone().map(|m| SignalMeta { noise_factor, ..m }),
    })
}

pub(crate) fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (x.len() - 1) as f64).sqrt()
}

/// Simulate one signal end to end (RR, pulse train) from its own seed.
pub fn simulate(config: &SimConfig) -> Result<Signal> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rr = gen_rr(config, &mut rng)?;
    synth_ppg(&rr, config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "val" => Some(Partition::Val),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Noise-factor cut points for the quality proxy label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaThresholds {
    pub excellent_max: f64,
    pub acceptable_max: f64,
}

impl Default for QaThresholds {
    fn default() -> Self {
        Self {
            excellent_max: 0.15,
            acceptable_max: 0.75,
        }
    }
}

impl QaThresholds {
    pub fn label(&self, noise_factor: f64) -> QaClass {
        if noise_factor <= self.excellent_max {
            QaClass::Excellent
        } else if noise_factor <= self.acceptable_max {
            QaClass::Acceptable
        } else {
            QaClass::Poor
        }
    }
}

/// Everything needed to regenerate a simulated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub seed: u64,
    /// Heart rates drawn per synthetic subject.
    pub bpm: Vec<f64>,
    pub noise_factors: Vec<f64>,
    /// Fraction of each partition simulated as AF.
    pub af_fraction: f64,
    /// Records per partition, in train/val/test order.
    pub counts: [usize; 3],
    pub windows_per_subject: usize,
    pub record_s: f64,
    pub fs: f64,
    /// Range of the AF RR coefficient of variation, drawn per subject.
    pub af_cv: (f64, f64),
    pub sinus_rsa_depth: f64,
    pub bw_amp: (f64, f64),
    pub bw_freq: (f64, f64),
    pub am_depth: (f64, f64),
    pub am_freq: (f64, f64),
    pub qa: QaThresholds,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            seed: 1,
            bpm: vec![50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0],
            noise_factors: DEFAULT_NOISE_FACTORS.to_vec(),
            af_fraction: 0.5,
            counts: [160, 32, 32],
            windows_per_subject: 4,
            record_s: 25.0,
            fs: 128.0,
            af_cv: (0.15, 0.30),
            sinus_rsa_depth: 0.05,
            bw_amp: (0.0, 0.3),
            bw_freq: (0.05, 0.3),
            am_depth: (0.0, 0.2),
            am_freq: (0.1, 0.4),
            qa: QaThresholds::default(),
        }
    }
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.bpm.is_empty() || self.noise_factors.is_empty() {
            return bad("recipe needs at least one bpm and one noise factor");
        }
        if self.counts.iter().all(|&c| c == 0) {
            return bad("recipe has no records");
        }
        if self.noise_factors.iter().any(|&f| !(f >= 0.0 && f.is_finite())) {
            return bad("noise factors must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.af_fraction) {
            return bad("af_fraction must be in [0, 1]");
        }
        if self.windows_per_subject == 0 {
            return bad("windows_per_subject must be positive");
        }
        let ranges = [self.af_cv, self.bw_amp, self.bw_freq, self.am_depth, self.am_freq];
        if ranges.iter().any(|&(lo, hi)| !(lo <= hi) || lo < 0.0) {
            return bad("parameter ranges must be non-negative with lo <= hi");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// One simulated recording with its clean source and corrupted copy.
#[derive(Clone, Debug, PartialEq)]
pub struct SimRecord {
    pub index: usize,
    pub subject_id: String,
    pub episode_id: String,
    pub partition: Partition,
    pub rhythm: RhythmClass,
    pub qa: QaClass,
    pub noise_factor: f64,
    pub clean: Signal,
    pub noisy: Signal,
}

/// Per-subject draw shared by all records of the subject.
#[derive(Clone, Debug)]
struct SubjectDraw {
    bpm: f64,
    fm_cv: f64,
    bw_amp: f64,
    bw_freq: f64,
    am_depth: f64,
    am_freq: f64,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Independent stream for item `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Layout of one record before simulation: who it belongs to and its labels.
#[derive(Clone, Debug)]
struct Slot {
    partition: Partition,
    rhythm: RhythmClass,
    noise_factor: f64,
    subject: usize,
}

fn plan(recipe: &DatasetRecipe) -> Vec<Slot> {
    let mut slots = Vec::with_capacity(recipe.total());
    let mut subject = 0usize;
    for (p, &count) in Partition::ALL.iter().zip(&recipe.counts) {
        let n_af = (count as f64 * recipe.af_fraction).round() as usize;
        for (rhythm, n) in [(RhythmClass::Sinus, count - n_af), (RhythmClass::Af, n_af)] {
            for k in 0..n {
                if k % recipe.windows_per_subject == 0 {
                    subject += 1;
                }
                slots.push(Slot {
                    partition: *p,
                    rhythm,
                    noise_factor: recipe.noise_factors[k % recipe.noise_factors.len()],
                    subject,
                });
            }
        }
    }
    slots
}

/// Simulate every record of `recipe`. Records are generated from
/// independent `(seed, index)` streams so the result does not depend on
/// evaluation order or thread count.
pub fn make_sim_dataset(recipe: &DatasetRecipe) -> Result<Vec<SimRecord>> {
    use rayon::prelude::*;

    recipe.validate()?;
    let slots = plan(recipe);
    let n_subjects = slots.last().map_or(0, |s| s.subject);
    let subjects: Vec<SubjectDraw> = (1..=n_subjects)
        .map(|s| {
            // Subject streams live in a separate index range from record streams.
            let mut rng = stream_rng(recipe.seed, (1u64 << 40) + s as u64);
            SubjectDraw {
                bpm: recipe.bpm[rng.random_range(0..recipe.bpm.len())],
                fm_cv: uniform(&mut rng, recipe.af_cv),
                bw_amp: uniform(&mut rng, recipe.bw_amp),
                bw_freq: uniform(&mut rng, recipe.bw_freq),
                am_depth: uniform(&mut rng, recipe.am_depth),
                am_freq: uniform(&mut rng, recipe.am_freq),
            }
        })
        .collect();

    slots
        .par_iter()
        .enumerate()
        .map(|(index, slot)| {
            let draw = &subjects[slot.subject - 1];
            let mut rng = stream_rng(recipe.seed, index as u64);
            let subject_id = format!("s{:05}", slot.subject);
            let config = SimConfig {
                bpm: draw.bpm,
                duration_s: recipe.record_s,
                fs: recipe.fs,
                rhythm: slot.rhythm,
                bw_amp: draw.bw_amp,
                bw_freq: draw.bw_freq,
                am_depth: draw.am_depth,
                am_freq: draw.am_freq,
                fm_cv: match slot.rhythm {
                    RhythmClass::Af => draw.fm_cv,
                    RhythmClass::Sinus => recipe.sinus_rsa_depth,
                },
                noise_factor: slot.noise_factor,
                seed: rng.random(),
                ..SimConfig::default()
            };
            let meta = SignalMeta {
                subject_id: subject_id.clone(),
                rhythm: slot.rhythm,
                noise_factor: 0.0,
            };
            let clean = simulate(&config)?.with_meta(meta);
            let noisy = corrupt(&clean, slot.noise_factor, &mut rng)?;
            Ok(SimRecord {
                index,
                episode_id: format!("e{:05}", slot.subject),
                subject_id,
                partition: slot.partition,
                rhythm: slot.rhythm,
                qa: recipe.qa.label(slot.noise_factor),
                noise_factor: slot.noise_factor,
                clean,
                noisy,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sinus_60_bpm_gives_about_25_one_second_intervals() {
        let cfg = SimConfig::default();
        let rr = gen_rr(&cfg, &mut rng(1)).unwrap();
        assert!((24..=26).contains(&rr.len()), "{}", rr.len());
        assert!(rr.iter().all(|&v| (v - 1.0).abs() < 0.06));
    }

    #[test]
    fn unmodulated_sinus_is_exactly_periodic() {
        let cfg = SimConfig { fm_cv: 0.0, bpm: 75.0, ..SimConfig::default() };
        let rr = gen_rr(&cfg, &mut rng(1)).unwrap();
        assert!(rr.iter().all(|&v| v == 0.8));
    }

    #[test]
    fn af_interval_cv_matches_requested() {
        let cfg = SimConfig {
            rhythm: RhythmClass::Af,
            fm_cv: 0.25,
            duration_s: 1000.0,
            ..SimConfig::default()
        };
        let rr = gen_rr(&cfg, &mut rng(9)).unwrap();
        assert!(rr.len() >= 1000);
        let rr = &rr[..1000];
        let mean = rr.iter().sum::<f64>() / rr.len() as f64;
        let cv = sample_std(rr) / mean;
        assert!((0.20..=0.30).contains(&cv), "cv {cv}");
    }

    #[test]
    fn af_without_modulation_is_rejected() {
        let cfg = SimConfig { rhythm: RhythmClass::Af, fm_cv: 0.0, ..SimConfig::default() };
        assert!(matches!(gen_rr(&cfg, &mut rng(0)), Err(Error::Config(_))));
        let cfg = SimConfig { bpm: 250.0, ..SimConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = SimConfig { fs: 8.0, ..SimConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn synth_length_and_domain_errors() {
        let cfg = SimConfig::default();
        let sig = synth_ppg(&[1.0; 25], &cfg).unwrap();
        assert_eq!(sig.samples.len(), 3200);
        assert!(matches!(synth_ppg(&[1.0, 0.0], &cfg), Err(Error::Domain(_))));
        assert!(matches!(synth_ppg(&[], &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn unmodulated_beats_have_equal_peaks() {
        let cfg = SimConfig { fm_cv: 0.0, ..SimConfig::default() };
        let sig = synth_ppg(&[1.0; 25], &cfg).unwrap();
        let peaks: Vec<f64> = sig
            .samples
            .chunks(128)
            .map(|c| c.iter().cloned().fold(f64::MIN, f64::max))
            .collect();
        for p in &peaks {
            assert!((p - peaks[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn baseline_wander_shows_as_spectral_line() {
        use rustfft::{num_complex::Complex, FftPlanner};
        let base = SimConfig { fm_cv: 0.0, ..SimConfig::default() };
        let wander = SimConfig { bw_amp: 0.1, bw_freq: 0.2, ..base.clone() };
        let spectrum = |cfg: &SimConfig| {
            let sig = synth_ppg(&[1.0; 25], cfg).unwrap();
            let mut buf: Vec<Complex<f64>> = sig.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
            buf.iter().map(|c| c.norm()).collect::<Vec<_>>()
        };
        let with = spectrum(&wander);
        let without = spectrum(&base);
        // 25 s record: 0.04 Hz bins, 0.2 Hz is bin 5.
        let expected = 0.1 * base.template.peak() * 3200.0 / 2.0;
        assert!(((with[5] - without[5]) - expected).abs() < 0.02 * expected);
        for k in [2, 3, 4, 6, 7, 8] {
            assert!(with[5] > 20.0 * with[k], "bin {k}");
        }
    }

    #[test]
    fn corrupt_zero_is_identity_and_negative_rejected() {
        let sig = simulate(&SimConfig::default()).unwrap();
        assert_eq!(corrupt(&sig, 0.0, &mut rng(3)).unwrap(), sig);
        assert!(matches!(corrupt(&sig, -0.1, &mut rng(3)), Err(Error::Domain(_))));
    }

    #[test]
    fn unit_noise_factor_gives_zero_db_snr() {
        let cfg = SimConfig { duration_s: 10_000.0 / 128.0, ..SimConfig::default() };
        let clean = simulate(&cfg).unwrap();
        assert_eq!(clean.samples.len(), 10_000);
        let noisy = corrupt(&clean, 1.0, &mut rng(5)).unwrap();
        let noise: Vec<f64> = noisy.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect();
        let snr = 20.0 * (sample_std(&clean.samples) / sample_std(&noise)).log10();
        assert!(snr.abs() < 1.0, "snr {snr}");
    }

    #[test]
    fn corruption_is_seed_deterministic() {
        let sig = simulate(&SimConfig::default()).unwrap();
        let a = corrupt(&sig, 0.5, &mut rng(11)).unwrap();
        let b = corrupt(&sig, 0.5, &mut rng(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_count_arithmetic_and_labels() {
        let recipe = DatasetRecipe {
            noise_factors: METHODS_NOISE_FACTORS.to_vec(),
            counts: [140, 0, 0],
            record_s: 4.0,
            ..DatasetRecipe::default()
        };
        let recs = make_sim_dataset(&recipe).unwrap();
        assert_eq!(recs.len(), 140);
        for rhythm in [RhythmClass::Sinus, RhythmClass::Af] {
            for &f in &METHODS_NOISE_FACTORS {
                let n = recs.iter().filter(|r| r.rhythm == rhythm && r.noise_factor == f).count();
                assert_eq!(n, 10);
            }
        }
        for r in &recs {
            assert_eq!(r.qa, recipe.qa.label(r.noise_factor));
        }
    }

    #[test]
    fn default_noise_grid_is_union_of_both_lists() {
        let mut union: Vec<f64> = METHODS_NOISE_FACTORS.iter().chain(&FIGURE_NOISE_FACTORS).cloned().collect();
        union.sort_by(f64::total_cmp);
        union.dedup();
        assert_eq!(union, DEFAULT_NOISE_FACTORS.to_vec());
    }

    #[test]
    fn partitions_are_subject_disjoint() {
        let recipe = DatasetRecipe { counts: [24, 8, 8], record_s: 4.0, ..DatasetRecipe::default() };
        let recs = make_sim_dataset(&recipe).unwrap();
        for a in &recs {
            for b in &recs {
                if a.subject_id == b.subject_id {
                    assert_eq!(a.partition, b.partition);
                    assert_eq!(a.rhythm, b.rhythm);
                }
            }
        }
    }

    #[test]
    fn empty_recipe_is_rejected() {
        let recipe = DatasetRecipe { counts: [0, 0, 0], ..DatasetRecipe::default() };
        assert!(matches!(make_sim_dataset(&recipe), Err(Error::Config(_))));
        let recipe = DatasetRecipe { noise_factors: vec![], ..DatasetRecipe::default() };
        assert!(matches!(make_sim_dataset(&recipe), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_is_deterministic_across_thread_counts() {
        let recipe = DatasetRecipe { counts: [16, 4, 4], record_s: 6.0, ..DatasetRecipe::default() };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| make_sim_dataset(&recipe).unwrap());
        let b = three.install(|| make_sim_dataset(&recipe).unwrap());
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn amplitude_bound_holds(
            bpm in 40.0f64..180.0,
            bw_amp in 0.0f64..0.5,
            am_depth in 0.0f64..0.5,
            af in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            let cfg = SimConfig {
                bpm,
                bw_amp,
                am_depth,
                duration_s: 10.0,
                rhythm: if af { RhythmClass::Af } else { RhythmClass::Sinus },
                fm_cv: if af { 0.2 } else { 0.05 },
                seed,
                ..SimConfig::default()
            };
            let sig = simulate(&cfg).unwrap();
            let bound = (1.0 + bw_amp + am_depth) * cfg.template.peak();
            proptest::prop_assert!(sig.samples.iter().all(|v| v.is_finite() && v.abs() <= bound + 1e-12));
        }

        #[test]
        fn simulation_is_seed_deterministic(seed in 0u64..u64::MAX) {
            let cfg = SimConfig { rhythm: RhythmClass::Af, fm_cv: 0.2, seed, duration_s: 5.0, ..SimConfig::default() };
            proptest::prop_assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        }
    }
}
