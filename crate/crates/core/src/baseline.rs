//! Hand-crafted window features and a multi-output Gini random forest.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{detect_peaks, QaClass, Window};
use crate::error::{Error, Result};
use crate::sim::{stream_rng, RhythmClass};

pub const N_FEATURES: usize = 8;
pub const HIST_BINS: usize = 16;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "kurtosis",
    "skew",
    "spectral_entropy",
    "zero_crossings",
    "hjorth_mobility",
    "hjorth_complexity",
    "nrmssd",
    "shannon_entropy",
];

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kurtosis: f64,
    pub skew: f64,
    pub spectral_entropy: f64,
    pub zero_crossings: f64,
    pub hjorth_mobility: f64,
    pub hjorth_complexity: f64,
    pub nrmssd: f64,
    pub shannon_entropy: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.kurtosis,
            self.skew,
            self.spectral_entropy,
            self.zero_crossings,
            self.hjorth_mobility,
            self.hjorth_complexity,
            self.nrmssd,
            self.shannon_entropy,
        ]
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

fn diff(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Fisher excess kurtosis and skewness from population moments; both are 0
/// for a constant input.
pub fn moments(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let n = x.len() as f64;
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 == 0.0 {
        return (0.0, 0.0);
    }
    (m4 / (m2 * m2) - 3.0, m3 / m2.powf(1.5))
}

/// Shannon entropy (nats) of the normalized one-sided power spectrum of the
/// mean-removed signal.
pub fn spectral_entropy(x: &[f64]) -> f64 {
    let m = mean(x);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v - m, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let power: Vec<f64> = buf[..=x.len() / 2].iter().map(|c| c.norm_sqr()).collect();
    entropy_of(&power)
}

fn entropy_of(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Sign changes of the mean-removed signal.
pub fn zero_crossings(x: &[f64]) -> usize {
    let m = mean(x);
    x.windows(2)
        .filter(|w| ((w[0] - m) >= 0.0) != ((w[1] - m) >= 0.0))
        .count()
}

/// Hjorth mobility and complexity; 0 for a constant input.
pub fn hjorth(x: &[f64]) -> (f64, f64) {
    let mobility = |v: &[f64]| {
        let var = variance(v);
        if var == 0.0 || v.len() < 2 {
            0.0
        } else {
            (variance(&diff(v)) / var).sqrt()
        }
    };
    let mob = mobility(x);
    if mob == 0.0 {
        return (0.0, 0.0);
    }
    (mob, mobility(&diff(x)) / mob)
}

/// RMSSD of peak-to-peak intervals divided by the mean interval; 0 with
/// fewer than 3 peaks.
pub fn nrmssd(x: &[f64], fs: f64) -> f64 {
    let peaks = detect_peaks(x, fs);
    if peaks.len() < 3 {
        return 0.0;
    }
    let intervals: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64 / fs).collect();
    let sq: Vec<f64> = diff(&intervals).iter().map(|d| d * d).collect();
    mean(&sq).sqrt() / mean(&intervals)
}

/// Entropy (nats) of a 16-bin histogram over `[0, 1]`.
pub fn histogram_entropy(x: &[f64]) -> f64 {
    let mut counts = [0.0; HIST_BINS];
    for &v in x {
        let bin = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        counts[bin] += 1.0;
    }
    entropy_of(&counts)
}

/// Features of a raw sample array on a grid of rate `fs`.
pub fn features_from_samples(x: &[f64], fs: f64) -> Result<FeatureVector> {
    if x.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 samples, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite sample".into()));
    }
    let (kurtosis, skew) = moments(x);
    let (hjorth_mobility, hjorth_complexity) = hjorth(x);
    Ok(FeatureVector {
        kurtosis,
        skew,
        spectral_entropy: spectral_entropy(x),
        zero_crossings: zero_crossings(x) as f64,
        hjorth_mobility,
        hjorth_complexity,
        nrmssd: nrmssd(x, fs),
        shannon_entropy: histogram_entropy(x),
    })
}

pub fn extract_features(w: &Window) -> Result<FeatureVector> {
    w.validate()?;
    features_from_samples(&w.as_f64(), w.fs_effective)
}

/// One tree node. Leaves have `feature == None` and carry class counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub counts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf<'a>(&'a self, x: &[f64]) -> &'a Node {
        let mut node = &self.nodes[0];
        while let Some(f) = node.feature {
            node = &self.nodes[if x[f] <= node.threshold { node.left } else { node.right }];
        }
        node
    }

    /// Class frequencies of the leaf reached by `x`.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let counts = &self.leaf(x).counts;
        let total: f64 = counts.iter().sum();
        counts.iter().map(|c| c / total).collect()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            match n.feature {
                None => 0,
                Some(_) => 1 + go(t, n.left).max(go(t, n.right)),
            }
        }
        go(self, 0)
    }
}

/// Trees for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub n_classes: usize,
    pub trees: Vec<Tree>,
}

impl Ensemble {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.predict(x)) {
                *a += p;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Independent ensembles for the rhythm and QA targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub rhythm: Ensemble,
    pub qa: Ensemble,
    pub n_estimators: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_estimators: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            seed: 1,
        }
    }
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total) * (c / total)).sum::<f64>()
}

struct Split {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

/// Best split of `idx` on `feature`: weighted child Gini, midpoint
/// thresholds rounded to `f32`. Lower thresholds win ties.
fn best_split_on(x: &[Vec<f64>], y: &[usize], n_classes: usize, idx: &[usize], feature: usize) -> Option<Split> {
    let mut order: Vec<usize> = idx.to_vec();
    order.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]).then(a.cmp(&b)));
    let n = order.len() as f64;
    let mut right = vec![0.0; n_classes];
    for &i in &order {
        right[y[i]] += 1.0;
    }
    let mut left = vec![0.0; n_classes];
    let mut best: Option<Split> = None;
    let mut k = 0;
    while k < order.len() - 1 {
        let v = x[order[k]][feature];
        // Move the whole run of equal values to the left side.
        while k < order.len() && x[order[k]][feature] == v {
            left[y[order[k]]] += 1.0;
            right[y[order[k]]] -= 1.0;
            k += 1;
        }
        if k == order.len() {
            break;
        }
        let next = x[order[k]][feature];
        let threshold = ((v + next) / 2.0) as f32 as f64;
        if !(threshold >= v && threshold < next) {
            continue;
        }
        let nl = k as f64;
        let nr = n - nl;
        let impurity = (nl * gini(&left, nl) + nr * gini(&right, nr)) / n;
        if best.as_ref().is_none_or(|b| impurity < b.impurity) {
            best = Some(Split {
                feature,
                threshold,
                impurity,
            });
        }
    }
    best
}

fn grow_tree<R: Rng>(x: &[Vec<f64>], y: &[usize], n_classes: usize, rows: Vec<usize>, rng: &mut R) -> Tree {
    let d = x[0].len();
    let mtry = ((d as f64).sqrt().floor() as usize).max(1);
    let mut nodes: Vec<Node> = Vec::new();
    // (node slot, rows)
    let mut stack = vec![(0usize, rows)];
    nodes.push(Node {
        feature: None,
        threshold: 0.0,
        left: 0,
        right: 0,
        counts: Vec::new(),
    });
    while let Some((slot, idx)) = stack.pop() {
        let mut counts = vec![0.0; n_classes];
        for &i in &idx {
            counts[y[i]] += 1.0;
        }
        let total = idx.len() as f64;
        let parent = gini(&counts, total);
        nodes[slot].counts = counts;
        if parent == 0.0 || idx.len() < 2 {
            continue;
        }
        // Features are visited in a random order; the first `mtry` form the
        // candidate set, and further features are tried only while no valid
        // split has been found.
        let perm: Vec<usize> = sample(rng, d, d).into_vec();
        let mut best: Option<Split> = None;
        let mut tried = 0;
        for chunk_end in mtry..=d {
            let mut group: Vec<usize> = perm[tried..chunk_end.max(tried)].to_vec();
            group.sort_unstable();
            for f in group {
                if let Some(s) = best_split_on(x, y, n_classes, &idx, f) {
                    let better = match &best {
                        None => true,
                        Some(b) => {
                            s.impurity < b.impurity
                                || (s.impurity == b.impurity
                                    && (s.feature < b.feature || (s.feature == b.feature && s.threshold < b.threshold)))
                        }
                    };
                    if better {
                        best = Some(s);
                    }
                }
            }
            tried = chunk_end.max(tried);
            if best.is_some() || tried >= d {
                break;
            }
        }
        let Some(split) = best else { continue };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][split.feature] <= split.threshold);
        let li = nodes.len();
        for _ in 0..2 {
            nodes.push(Node {
                feature: None,
                threshold: 0.0,
                left: 0,
                right: 0,
                counts: Vec::new(),
            });
        }
        let node = &mut nodes[slot];
        node.feature = Some(split.feature);
        node.threshold = split.threshold;
        node.left = li;
        node.right = li + 1;
        stack.push((li + 1, r));
        stack.push((li, l));
    }
    Tree { nodes }
}

/// Bootstrap ensemble for one target; tree `t` draws from its own stream so
/// the result does not depend on the thread count.
pub fn fit_ensemble(x: &[Vec<f64>], y: &[usize], n_classes: usize, n_estimators: usize, seed: u64, target: u64) -> Result<Ensemble> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Config(format!(
            "need matching non-empty features and labels, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if n_estimators == 0 {
        return Err(Error::Config("n_estimators must be >= 1".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!("label {bad} outside {n_classes} classes")));
    }
    let n = x.len();
    let trees = (0..n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, (target << 32) | t as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            grow_tree(x, y, n_classes, rows, &mut rng)
        })
        .collect();
    Ok(Ensemble { n_classes, trees })
}

pub fn fit_forest(x: &[FeatureVector], y: &[(RhythmClass, QaClass)], config: &ForestConfig) -> Result<Forest> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::Config(format!(
            "random forest needs at least 2 labeled rows, got {} features and {} labels",
            x.len(),
            y.len()
        )));
    }
    let rows: Vec<Vec<f64>> = x.iter().map(|f| f.to_array().to_vec()).collect();
    let yr: Vec<usize> = y.iter().map(|(r, _)| r.index()).collect();
    let yq: Vec<usize> = y.iter().map(|(_, q)| q.index()).collect();
    Ok(Forest {
        rhythm: fit_ensemble(&rows, &yr, 2, config.n_estimators, config.seed, 0)?,
        qa: fit_ensemble(&rows, &yq, 3, config.n_estimators, config.seed, 1)?,
        n_estimators: config.n_estimators,
        seed: config.seed,
    })
}

/// `([P(sinus), P(AF)], [P(excellent), P(acceptable), P(poor)])`.
pub fn predict_forest(forest: &Forest, x: &FeatureVector) -> ([f64; 2], [f64; 3]) {
    let v = x.to_array();
    let r = forest.rhythm.predict(&v);
    let q = forest.qa.predict(&v);
    ([r[0], r[1]], [q[0], q[1], q[2]])
}
