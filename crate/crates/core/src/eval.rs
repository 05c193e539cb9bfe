//! Window-level precision, recall, F1 and auPRC for the AF class, QA gating,
//! episode sensitivity and the false-alarm rate on AF-free subjects.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::deepbeat::Prediction;
use crate::dsp::QaClass;
use crate::error::{Error, Result};
use crate::sim::RhythmClass;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One scored window with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub window_id: String,
    pub subject_id: String,
    pub rhythm: RhythmClass,
    pub qa: Option<QaClass>,
    pub prediction: Prediction,
    pub episode_id: Option<String>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.window_id.is_empty() || self.subject_id.is_empty() {
            return Err(Error::Data("evaluation record with empty window or subject id".into()));
        }
        self.prediction.validate()
    }

    pub fn is_af(&self) -> bool {
        self.rhythm == RhythmClass::Af
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 from a confusion matrix; empty denominators give 0.
pub fn prf1_from_counts(counts: Confusion) -> Prf1 {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf1 {
        precision,
        recall,
        f1,
        counts,
    }
}

/// AF is predicted when `P(AF) >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn prf1(records: &[EvalRecord], threshold: f64) -> Prf1 {
    let (scores, labels) = scores_labels(records);
    prf1_from_counts(confusion(&scores, &labels, threshold))
}

fn scores_labels(records: &[EvalRecord]) -> (Vec<f64>, Vec<bool>) {
    records.iter().map(|r| (r.prediction.p_af(), r.is_af())).unzip()
}

/// One operating point of the precision-recall curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score, highest threshold first.
/// Tied scores enter the curve together.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("score {i} is not finite")));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "precision-recall needs both classes, got {positives} positives of {}",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]].total_cmp(&t) == Ordering::Equal {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(points)
}

/// Step-wise average precision `sum (R_i - R_{i-1}) P_i`.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in pr_curve(scores, labels)? {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    Ok(area)
}

/// Keep records whose QA argmax is `level`; `None` keeps everything.
/// Returns the retained records and the number gated out.
pub fn qa_gate(records: &[EvalRecord], level: Option<QaClass>) -> (Vec<EvalRecord>, usize) {
    let Some(level) = level else {
        return (records.to_vec(), 0);
    };
    let kept: Vec<EvalRecord> = records.iter().filter(|r| r.prediction.qa_argmax() == level).cloned().collect();
    let gated = records.len() - kept.len();
    (kept, gated)
}

/// A fraction reported with its numerator and denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub count: usize,
    pub total: usize,
}

impl Rate {
    fn new(count: usize, total: usize) -> Self {
        Self {
            value: count as f64 / total as f64,
            count,
            total,
        }
    }
}

/// Fraction of AF episodes with at least one window predicted AF.
pub fn episode_sensitivity(records: &[EvalRecord], threshold: f64) -> Result<Rate> {
    let mut episodes: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for r in records {
        let id = r
            .episode_id
            .as_deref()
            .ok_or_else(|| Error::Data(format!("window {} has no episode id", r.window_id)))?;
        let e = episodes.entry(id).or_insert((r.is_af(), false));
        if e.0 != r.is_af() {
            return Err(Error::Data(format!("episode {id} mixes rhythms")));
        }
        e.1 |= r.prediction.p_af() >= threshold;
    }
    let af: Vec<bool> = episodes.values().filter(|e| e.0).map(|e| e.1).collect();
    if af.is_empty() {
        return Err(Error::UndefinedMetric("no AF episodes".into()));
    }
    Ok(Rate::new(af.iter().filter(|&&d| d).count(), af.len()))
}

/// Fraction of windows predicted AF among windows of AF-free subjects.
pub fn false_positive_rate(records: &[EvalRecord], threshold: f64) -> Result<Rate> {
    if let Some(r) = records.iter().find(|r| r.is_af()) {
        return Err(Error::Data(format!("window {} is labeled AF", r.window_id)));
    }
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no windows to measure false alarms on".into()));
    }
    let alarms = records.iter().filter(|r| r.prediction.p_af() >= threshold).count();
    Ok(Rate::new(alarms, records.len()))
}

/// Windows of subjects that have no AF window at all.
pub fn af_free(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let af_subjects: BTreeSet<&str> = records.iter().filter(|r| r.is_af()).map(|r| r.subject_id.as_str()).collect();
    records.iter().filter(|r| !af_subjects.contains(r.subject_id.as_str())).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold: f64,
    pub gate: Option<QaClass>,
    pub episodes: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            gate: Some(QaClass::Excellent),
            episodes: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auprc: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub n_windows: usize,
    pub n_gated_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_sensitivity: Option<Rate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub false_positive_rate: Option<Rate>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Gate, then score the retained windows. With `episodes` set, episode
/// sensitivity and the AF-free false-alarm rate are added when defined.
pub fn evaluate(records: &[EvalRecord], cfg: &EvalConfig) -> Result<MetricsReport> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", cfg.threshold)));
    }
    for r in records {
        r.validate()?;
    }
    let (kept, n_gated_out) = qa_gate(records, cfg.gate);
    if kept.is_empty() {
        return Err(Error::UndefinedMetric("no windows left after QA gating".into()));
    }
    let (scores, labels) = scores_labels(&kept);
    let m = prf1_from_counts(confusion(&scores, &labels, cfg.threshold));
    let auprc = auprc(&scores, &labels)?;
    let (mut episode, mut fpr) = (None, None);
    if cfg.episodes {
        episode = match episode_sensitivity(&kept, cfg.threshold) {
            Ok(r) => Some(r),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let clean = af_free(&kept);
        fpr = (!clean.is_empty()).then(|| false_positive_rate(&clean, cfg.threshold)).transpose()?;
    }
    Ok(MetricsReport {
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auprc,
        tp: m.counts.tp,
        fp: m.counts.fp,
        fn_: m.counts.fn_,
        tn: m.counts.tn,
        n_windows: kept.len(),
        n_gated_out,
        episode_sensitivity: episode,
        false_positive_rate: fpr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rec(id: usize, af: bool, p_af: f64, qa: usize, episode: &str) -> EvalRecord {
        let mut qa_probs = [0.1, 0.1, 0.1];
        qa_probs[qa] = 0.8;
        EvalRecord {
            window_id: format!("w{id}"),
            subject_id: format!("s{}", episode),
            rhythm: if af { RhythmClass::Af } else { RhythmClass::Sinus },
            qa: None,
            prediction: Prediction {
                rhythm_probs: [1.0 - p_af, p_af],
                qa_probs,
            },
            episode_id: Some(episode.to_string()),
        }
    }

    /// Mean over positives of the precision at that positive's score.
    fn ap_by_positives(scores: &[f64], labels: &[bool]) -> f64 {
        let n_pos = labels.iter().filter(|&&y| y).count() as f64;
        let mut total = 0.0;
        for (i, _) in labels.iter().enumerate().filter(|(_, &y)| y) {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let tp = above.iter().filter(|&&j| labels[j]).count() as f64;
            total += tp / above.len() as f64;
        }
        total / n_pos
    }

    #[test]
    fn hand_case_average_precision() {
        let ap = auprc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert_relative_eq!(ap, 5.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auprc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auprc(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ties_enter_together() {
        // one threshold holding both windows: precision 1/2 at recall 1
        assert_eq!(auprc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn random_scores_give_prevalence() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for p in [0.1, 0.3, 0.5] {
            let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(p)).collect();
            let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
            let ap = auprc(&scores, &labels).unwrap();
            assert!((ap - p).abs() < 0.03, "prevalence {p}: {ap}");
        }
    }

    #[test]
    fn prf1_formula_cases() {
        let m = prf1_from_counts(Confusion { tp: 1, fp: 1, fn_: 0, tn: 3 });
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert_relative_eq!(m.f1, 2.0 / 3.0);
        let none = prf1_from_counts(Confusion { tp: 0, fp: 0, fn_: 4, tn: 2 });
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let records = vec![rec(0, true, 0.9, 0, "a"), rec(1, false, 0.1, 0, "b")];
        let all = prf1(&records, 0.5);
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn gate_keeps_excellent_argmax_only() {
        let records = vec![rec(0, true, 0.9, 0, "a"), rec(1, true, 0.9, 2, "a"), rec(2, false, 0.2, 1, "b")];
        let (kept, gated) = qa_gate(&records, Some(QaClass::Excellent));
        assert_eq!((kept.len(), gated), (1, 2));
        assert_eq!(kept[0], records[0]);
        assert_eq!(qa_gate(&records, None).0, records);
    }

    #[test]
    fn gate_counts_uniform_argmax() {
        let records: Vec<EvalRecord> = (0..3000).map(|i| rec(i, i % 2 == 0, 0.5, i % 3, "e")).collect();
        for level in QaClass::ALL {
            let (kept, gated) = qa_gate(&records, Some(level));
            assert_eq!((kept.len(), gated), (1000, 2000));
        }
    }

    #[test]
    fn episode_fixture_seven_of_ten() {
        let mut records = Vec::new();
        for e in 0..10 {
            for k in 0..3 {
                let hit = e < 7 && k == 1;
                records.push(rec(e * 3 + k, true, if hit { 0.8 } else { 0.2 }, 0, &format!("e{e}")));
            }
        }
        records.push(rec(99, false, 0.9, 0, "quiet"));
        let s = episode_sensitivity(&records, 0.5).unwrap();
        assert_eq!((s.count, s.total), (7, 10));
        assert_relative_eq!(s.value, 0.7);
    }

    #[test]
    fn episode_sensitivity_needs_af() {
        let records = vec![rec(0, false, 0.9, 0, "a")];
        assert!(matches!(episode_sensitivity(&records, 0.5), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn false_positive_rate_fraction() {
        let mut records: Vec<EvalRecord> = (0..10_000).map(|i| rec(i, false, 0.01, 0, "q")).collect();
        assert_eq!(false_positive_rate(&records, 0.5).unwrap().value, 0.0);
        records[17].prediction.rhythm_probs = [0.3, 0.7];
        let r = false_positive_rate(&records, 0.5).unwrap();
        assert_eq!((r.count, r.total), (1, 10_000));
        assert_relative_eq!(r.value, 1e-4);
        assert!(matches!(false_positive_rate(&[], 0.5), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_keys_are_fixed() {
        let records = vec![rec(0, true, 0.9, 0, "a"), rec(1, false, 0.4, 0, "b"), rec(2, false, 0.6, 2, "b")];
        let cfg = EvalConfig {
            episodes: true,
            ..EvalConfig::default()
        };
        let report = evaluate(&records, &cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let want: BTreeSet<&str> = [
            "precision",
            "recall",
            "f1",
            "auprc",
            "tp",
            "fp",
            "fn",
            "tn",
            "n_windows",
            "n_gated_out",
            "episode_sensitivity",
            "false_positive_rate",
        ]
        .into();
        assert_eq!(keys, want);
        assert_eq!((report.n_windows, report.n_gated_out), (2, 1));
        assert_eq!(report.false_positive_rate.unwrap().total, 1);
    }

    proptest! {
        #[test]
        fn auprc_matches_per_positive_oracle(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 20.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let n_pos = labels.iter().filter(|&&y| y).count();
            prop_assume!(n_pos > 0 && n_pos < labels.len());
            let ap = auprc(&scores, &labels).unwrap();
            prop_assert!((ap - ap_by_positives(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn raising_threshold_never_raises_recall(
            raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..100),
            a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let r_lo = prf1_from_counts(confusion(&scores, &labels, lo)).recall;
            let r_hi = prf1_from_counts(confusion(&scores, &labels, hi)).recall;
            prop_assert!(r_hi <= r_lo);
        }

        #[test]
        fn gating_is_a_pure_filter(
            raw in proptest::collection::vec((0.0f64..1.0, any::<bool>(), 0usize..3), 1..60)
        ) {
            let records: Vec<EvalRecord> = raw.iter().enumerate().map(|(i, r)| rec(i, r.1, r.0, r.2, "e")).collect();
            let (kept, gated) = qa_gate(&records, Some(QaClass::Acceptable));
            prop_assert_eq!(kept.len() + gated, records.len());
            let mut rest: Vec<EvalRecord> = records.iter().filter(|r| r.prediction.qa_argmax() != QaClass::Acceptable).cloned().collect();
            rest.extend(kept.iter().cloned());
            let union = prf1(&rest, 0.5);
            prop_assert_eq!(union.counts, prf1(&records, 0.5).counts);
            for k in &kept {
                prop_assert!(records.contains(k));
            }
        }
    }
}
