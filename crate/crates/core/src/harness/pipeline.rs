//! Steps shared by the CLI and the benchmark: simulation to a bundle, the
//! four classifier training modes, the forest baseline and scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetBundle, LabelRow};
use crate::baseline::{extract_features, fit_forest, predict_forest, Forest, ForestConfig};
use crate::cdae::{CdaeModel, Profile};
use crate::deepbeat::{build_deepbeat, train_deepbeat, Arch, DeepBeatModel, Prediction, TrainConfig};
use crate::dsp::{preprocess, PreprocessConfig, Window, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::eval::EvalRecord;
use crate::scalar::Scalar;
use crate::sim::{make_sim_dataset, DatasetRecipe};

/// Simulate `recipe` and cut every record into labeled windows. Noisy and
/// clean copies go through the same preprocessing, so row `i` of both blobs
/// covers the same samples.
pub fn simulate_bundle(recipe: &DatasetRecipe, pre: &PreprocessConfig) -> Result<DatasetBundle> {
    let records = make_sim_dataset(recipe)?;
    let per_record: Vec<Vec<(LabelRow, Window, Window)>> = records
        .par_iter()
        .map(|rec| {
            let noisy = preprocess(&rec.noisy, pre)?;
            let clean = preprocess(&rec.clean, pre)?;
            if noisy.len() != clean.len() {
                return Err(Error::Data(format!("record {} yields unequal window counts", rec.index)));
            }
            Ok(noisy
                .into_iter()
                .zip(clean)
                .map(|(n, c)| {
                    let label = LabelRow {
                        window_id: format!("r{:06}:{}", rec.index, n.origin.1),
                        subject_id: rec.subject_id.clone(),
                        partition: rec.partition,
                        rhythm: rec.rhythm,
                        qa: rec.qa,
                        episode_id: rec.episode_id.clone(),
                        noise_factor: rec.noise_factor,
                    };
                    (label, n, c)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let n: usize = per_record.iter().map(Vec::len).sum();
    let mut labels = Vec::with_capacity(n);
    let mut windows = Vec::with_capacity(n * WINDOW_LEN);
    let mut clean = Vec::with_capacity(n * WINDOW_LEN);
    for (label, nw, cw) in per_record.into_iter().flatten() {
        labels.push(label);
        windows.extend_from_slice(&nw.samples);
        clean.extend_from_slice(&cw.samples);
    }
    DatasetBundle::new(labels, windows, Some(clean), recipe.seed, Some(recipe.clone()))
}

/// At most `n` evenly spaced items of `rows`, in order.
pub fn spread(rows: &[usize], n: usize) -> Vec<usize> {
    if n >= rows.len() {
        return rows.to_vec();
    }
    (0..n).map(|k| rows[k * rows.len() / n]).collect()
}

/// The ablation grid: single- or multi-task, pretrained or random encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    MultiPretrained,
    MultiRandom,
    SinglePretrained,
    SingleRandom,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::MultiPretrained,
        TrainMode::MultiRandom,
        TrainMode::SinglePretrained,
        TrainMode::SingleRandom,
    ];

    pub fn multi_task(self) -> bool {
        matches!(self, TrainMode::MultiPretrained | TrainMode::MultiRandom)
    }

    pub fn pretrained(self) -> bool {
        matches!(self, TrainMode::MultiPretrained | TrainMode::SinglePretrained)
    }

    pub fn label(self) -> &'static str {
        match self {
            TrainMode::MultiPretrained => "multi-task, pretrained",
            TrainMode::MultiRandom => "multi-task, random init",
            TrainMode::SinglePretrained => "single-task, pretrained",
            TrainMode::SingleRandom => "single-task, random init",
        }
    }
}

/// Build and fine-tune one classifier. Single-task modes train the rhythm
/// head only (`lambda_qa = 0`).
pub fn train_mode<T: Scalar>(
    mode: TrainMode,
    encoder: Option<&CdaeModel<T>>,
    profile: Profile,
    arch: Arch,
    train: &[Window],
    val: &[Window],
    cfg: &TrainConfig,
) -> Result<DeepBeatModel<T>> {
    let encoder = match (mode.pretrained(), encoder) {
        (true, None) => return Err(Error::Config(format!("mode `{}` needs a pretrained encoder", mode.label()))),
        (true, e) => e,
        (false, _) => None,
    };
    let mut model = build_deepbeat(cfg.seed, encoder, profile, arch)?;
    let mut cfg = *cfg;
    if !mode.multi_task() {
        cfg.lambda_qa = 0.0;
    }
    train_deepbeat(&mut model, train, val, &cfg)?;
    Ok(model)
}

pub fn train_baseline(train: &[Window], cfg: &ForestConfig) -> Result<Forest> {
    let feats = train.par_iter().map(extract_features).collect::<Result<Vec<_>>>()?;
    let labels = train
        .iter()
        .map(|w| match (w.rhythm, w.qa) {
            (Some(r), Some(q)) => Ok((r, q)),
            _ => Err(Error::Data(format!("window {} is missing labels", w.id()))),
        })
        .collect::<Result<Vec<_>>>()?;
    fit_forest(&feats, &labels, cfg)
}

pub fn forest_predictions(forest: &Forest, windows: &[Window]) -> Result<Vec<Prediction>> {
    windows
        .par_iter()
        .map(|w| {
            let (rhythm_probs, qa_probs) = predict_forest(forest, &extract_features(w)?);
            Ok(Prediction { rhythm_probs, qa_probs })
        })
        .collect()
}

/// Pair predictions for bundle rows `rows` with their labels.
pub fn eval_records(bundle: &DatasetBundle, rows: &[usize], preds: &[Prediction]) -> Result<Vec<EvalRecord>> {
    if rows.len() != preds.len() {
        return Err(Error::Shape(format!("{} rows but {} predictions", rows.len(), preds.len())));
    }
    Ok(rows
        .iter()
        .zip(preds)
        .map(|(&i, p)| {
            let l = &bundle.labels[i];
            EvalRecord {
                window_id: l.window_id.clone(),
                subject_id: l.subject_id.clone(),
                rhythm: l.rhythm,
                qa: Some(l.qa),
                prediction: *p,
                episode_id: Some(l.episode_id.clone()),
            }
        })
        .collect())
}
