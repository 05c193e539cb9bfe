//! Multi-task classifier: the pretrained encoder, six shared hidden layers,
//! and two heads (rhythm: sinus vs AF, quality: excellent / acceptable /
//! poor) trained jointly on `CE_rhythm + lambda * CE_qa`.
//!
//! Conv hyperparameters recovered from the layer table (input widths 50,
//! 64, 35 ...):
//!
//! | layer          | count  | kernel | stride | padding | length   |
//! |----------------|--------|--------|--------|---------|----------|
//! | shared conv 1  | 12,864 | 4      | 3      | same    | 44 -> 15 |
//! | shared conv 2  | 8,995  | 4      | 3      | same    | 15 -> 5  |
//! | shared conv 3  | 9,024  | 4      | 1      | same    | 5 -> 5   |
//! | rhythm conv 1  | 11,235 | 5      | 3      | same    | 5 -> 2   |
//! | rhythm conv 2  | 1,775  | 2      | 2      | valid   | 2 -> 1   |
//! | rhythm conv 3  | 2,660  | 3      | 1      | same    | 1 -> 1   |
//! | quality conv 1 | 6,425  | 4      | 2      | same    | 5 -> 3   |
//!
//! The published count for rhythm conv 2 is 525, which no kernel size with
//! 35 input and 25 output channels can produce; the layer here matches the
//! published output shape.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdae::{encoder_specs, input_tensor, CdaeModel, Profile, ENCODER_CONVS, ENCODER_DEPTH, INPUT_SHAPE};
use crate::dsp::{QaClass, Window};
use crate::error::{Error, Result};
use crate::neuro::{
    cross_entropy, mix_seed, softmax_ce_loss, Activation, AdamConfig, AdamState, Grads, LayerSpec, Mode, Padding,
    PlateauSchedule, Sequential, Tape, Tensor, Upstream,
};
use crate::scalar::Scalar;
use crate::sim::RhythmClass;

/// Layer whose parameter count differs from the published table.
pub const COUNT_EXCEPTION: &str = "rhythm_conv2";
/// Published count for [`COUNT_EXCEPTION`].
pub const PUBLISHED_EXCEPTION_COUNT: usize = 525;

/// Index of the last shared-block convolution inside the trunk.
pub const SHARED_LAST_CONV: usize = 15;
/// Index of the last convolution inside the rhythm head.
pub const RHYTHM_LAST_CONV: usize = 6;
/// Index of the 175-unit dense layer inside the rhythm head.
pub const RHYTHM_EMBEDDING: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            dropout: 0.2,
            leaky_slope: 0.01,
        }
    }
}

fn named(name: &str, spec: LayerSpec) -> (String, LayerSpec) {
    (name.to_string(), spec)
}

fn conv(filters: usize, kernel: usize, stride: usize, padding: Padding, act: Activation) -> LayerSpec {
    LayerSpec::conv(filters, kernel, stride, padding, act)
}

pub fn shared_specs(profile: Profile, arch: Arch) -> Vec<(String, LayerSpec)> {
    let w = |c| profile.width(c);
    let mut specs = vec![named("shared_bn0", LayerSpec::batch_norm())];
    let convs = [(w(64), 3), (w(35), 3), (w(64), 1)];
    for (i, (filters, stride)) in convs.into_iter().enumerate() {
        let n = i + 1;
        specs.push(named(&format!("shared_conv{n}"), conv(filters, 4, stride, Padding::Same, Activation::Linear)));
        specs.push(named(&format!("shared_leaky{n}"), LayerSpec::LeakyReLU { slope: arch.leaky_slope }));
        specs.push(named(&format!("shared_bn{n}"), LayerSpec::batch_norm()));
        specs.push(named(&format!("shared_drop{n}"), LayerSpec::Dropout { rate: arch.dropout }));
    }
    specs
}

pub fn rhythm_specs(profile: Profile, arch: Arch) -> Vec<(String, LayerSpec)> {
    let w = |c| profile.width(c);
    let drop = || LayerSpec::Dropout { rate: arch.dropout };
    vec![
        named("rhythm_conv1", conv(w(35), 5, 3, Padding::Same, Activation::Relu)),
        named("rhythm_bn1", LayerSpec::batch_norm()),
        named("rhythm_drop1", drop()),
        named(COUNT_EXCEPTION, conv(w(25), 2, 2, Padding::Valid, Activation::Relu)),
        named("rhythm_bn2", LayerSpec::batch_norm()),
        named("rhythm_drop2", drop()),
        named("rhythm_conv3", conv(w(35), 3, 1, Padding::Same, Activation::Relu)),
        named("rhythm_bn3", LayerSpec::batch_norm()),
        named("rhythm_drop3", drop()),
        named("rhythm_flatten", LayerSpec::Flatten),
        named("rhythm_dense", LayerSpec::dense(175, Activation::Relu)),
        named("rhythm_out", LayerSpec::dense(2, Activation::Softmax)),
    ]
}

pub fn qa_specs(profile: Profile, arch: Arch) -> Vec<(String, LayerSpec)> {
    let w = |c| profile.width(c);
    vec![
        named("qa_conv1", conv(w(25), 4, 2, Padding::Same, Activation::Relu)),
        named("qa_bn1", LayerSpec::batch_norm()),
        named("qa_drop1", LayerSpec::Dropout { rate: arch.dropout }),
        named("qa_flatten", LayerSpec::Flatten),
        named("qa_dense", LayerSpec::dense(175, Activation::Relu)),
        named("qa_out", LayerSpec::dense(3, Activation::Softmax)),
    ]
}

/// Table sections in display order: `(title, input shape, layers)`.
pub fn table_sections(profile: Profile, arch: Arch) -> Result<Vec<(&'static str, Vec<usize>, Vec<(String, LayerSpec)>)>> {
    let enc = encoder_specs(profile);
    let shared = shared_specs(profile, arch);
    let mut shape = INPUT_SHAPE.to_vec();
    for (_, s) in enc.iter().chain(&shared) {
        shape = s.output_shape(&shape)?;
    }
    let enc_out = crate::neuro::describe(&INPUT_SHAPE, &enc)?.last().expect("encoder layers").output_shape.clone();
    Ok(vec![
        ("Extracted Encoder", INPUT_SHAPE.to_vec(), enc),
        ("Shared layers", enc_out, shared),
        ("Rhythm Branch", shape.clone(), rhythm_specs(profile, arch)),
        ("Quality Assessment Branch", shape, qa_specs(profile, arch)),
    ])
}

/// Class probabilities for one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `[P(sinus), P(AF)]`
    pub rhythm_probs: [f64; 2],
    /// `[P(excellent), P(acceptable), P(poor)]`
    pub qa_probs: [f64; 3],
}

impl Prediction {
    pub fn p_af(&self) -> f64 {
        self.rhythm_probs[RhythmClass::Af.index()]
    }

    pub fn qa_argmax(&self) -> QaClass {
        let mut best = 0;
        for i in 1..3 {
            if self.qa_probs[i] > self.qa_probs[best] {
                best = i;
            }
        }
        QaClass::from_index(best).expect("three classes")
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: &[f64]| p.iter().all(|v| v.is_finite() && *v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-6;
        if ok(&self.rhythm_probs) && ok(&self.qa_probs) {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid probability vectors {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepBeatEpoch {
    pub epoch: usize,
    pub train_rhythm: f64,
    pub train_qa: f64,
    pub train_total: f64,
    pub val_rhythm: f64,
    pub val_qa: f64,
    pub val_total: f64,
    pub val_rhythm_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda_qa: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            lambda_qa: 1.0,
            patience: 25,
            lr_factor: 0.1,
            min_lr: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepBeatModel<T> {
    /// Encoder (layers `..6`) followed by the shared block.
    pub trunk: Sequential<T>,
    pub rhythm: Sequential<T>,
    pub qa: Sequential<T>,
    pub profile: Profile,
    pub arch: Arch,
    pub seed: u64,
    /// Whether the encoder weights came from a pretrained autoencoder.
    pub pretrained: bool,
    pub trained: bool,
    pub history: Vec<DeepBeatEpoch>,
}

/// He-initialized classifier; when `encoder` is given its weights replace
/// the first three convolutions.
pub fn build_deepbeat<T: Scalar>(seed: u64, encoder: Option<&CdaeModel<T>>, profile: Profile, arch: Arch) -> Result<DeepBeatModel<T>> {
    let mut trunk_specs = encoder_specs(profile);
    trunk_specs.extend(shared_specs(profile, arch));
    let mut trunk = Sequential::new(&INPUT_SHAPE, trunk_specs)?;
    let head_in = trunk.output_shape().to_vec();
    let mut rhythm = Sequential::new(&head_in, rhythm_specs(profile, arch))?;
    let mut qa = Sequential::new(&head_in, qa_specs(profile, arch))?;
    trunk.init_he(seed);
    rhythm.init_he(mix_seed(seed, 1001));
    qa.init_he(mix_seed(seed, 1002));
    let mut model = DeepBeatModel {
        trunk,
        rhythm,
        qa,
        profile,
        arch,
        seed,
        pretrained: false,
        trained: false,
        history: Vec::new(),
    };
    if let Some(cdae) = encoder {
        transfer_encoder(cdae, &mut model)?;
    }
    Ok(model)
}

/// Copy the autoencoder's encoder convolutions into the classifier. The
/// copied layers stay trainable.
pub fn transfer_encoder<T: Scalar>(cdae: &CdaeModel<T>, db: &mut DeepBeatModel<T>) -> Result<()> {
    for &i in &ENCODER_CONVS {
        let src = &cdae.net.layers[i];
        let dst = &db.trunk.layers[i];
        if src.spec != dst.spec || src.input_shape() != dst.input_shape() {
            return Err(Error::Shape(format!(
                "encoder layer {i}: {:?} on {:?} cannot replace {:?} on {:?}",
                src.spec,
                src.input_shape(),
                dst.spec,
                dst.input_shape()
            )));
        }
    }
    for &i in &ENCODER_CONVS {
        db.trunk.layers[i].params = cdae.net.layers[i].params.clone();
    }
    db.pretrained = true;
    Ok(())
}

/// One-hot rows for the labels of `windows`.
fn targets<T: Scalar>(windows: &[&Window]) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = windows.len();
    let mut r = vec![T::zero(); b * 2];
    let mut q = vec![T::zero(); b * 3];
    for (i, w) in windows.iter().enumerate() {
        let (Some(rhythm), Some(qa)) = (w.rhythm, w.qa) else {
            return Err(Error::Data(format!("window {} of subject {} lacks labels", i, w.subject_id)));
        };
        r[i * 2 + rhythm.index()] = T::one();
        q[i * 3 + qa.index()] = T::one();
    }
    Ok((Tensor::new(vec![b, 2], r)?, Tensor::new(vec![b, 3], q)?))
}

/// Losses, gradients and tapes of one training batch.
pub struct Step<T> {
    pub rhythm_loss: f64,
    pub qa_loss: f64,
    pub trunk_grads: Grads<T>,
    pub rhythm_grads: Grads<T>,
    pub qa_grads: Grads<T>,
    tapes: [Tape<T>; 3],
}

impl<T: Scalar> DeepBeatModel<T> {
    pub fn head_input_shape(&self) -> &[usize] {
        self.trunk.output_shape()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.rhythm.param_count() + self.qa.param_count()
    }

    /// Encoder output (`[B, 44, 50]` in the paper profile).
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.trunk.predict_prefix(x, ENCODER_DEPTH)
    }

    /// Forward and backward pass of a batch with explicit one-hot targets.
    pub fn step(&self, x: &Tensor<T>, rhythm_t: &Tensor<T>, qa_t: &Tensor<T>, lambda_qa: f64, seed: u64) -> Result<Step<T>> {
        let (h, trunk_tape) = self.trunk.forward(x, Mode::Train, mix_seed(seed, 1))?;
        let (pr, rhythm_tape) = self.rhythm.forward(&h, Mode::Train, mix_seed(seed, 2))?;
        let (pq, qa_tape) = self.qa.forward(&h, Mode::Train, mix_seed(seed, 3))?;
        let (rhythm_loss, gr) = softmax_ce_loss(&pr, rhythm_t)?;
        let (qa_loss, mut gq) = softmax_ce_loss(&pq, qa_t)?;
        let lam = T::from_f64_lossy(lambda_qa);
        gq.data_mut().iter_mut().for_each(|g| *g *= lam);
        let (dr, rhythm_grads) = self.rhythm.backward(&rhythm_tape, Upstream::PreActivation(gr), true)?;
        let (dq, qa_grads) = self.qa.backward(&qa_tape, Upstream::PreActivation(gq), true)?;
        let mut dh = dr.expect("input gradient");
        for (a, b) in dh.data_mut().iter_mut().zip(dq.expect("input gradient").data()) {
            *a += *b;
        }
        let (_, trunk_grads) = self.trunk.backward(&trunk_tape, Upstream::Output(dh), false)?;
        Ok(Step {
            rhythm_loss,
            qa_loss,
            trunk_grads,
            rhythm_grads,
            qa_grads,
            tapes: [trunk_tape, rhythm_tape, qa_tape],
        })
    }

    /// Head probabilities for a batch of `[B, 800, 1]` inputs.
    pub fn predict_tensors(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let h = self.trunk.predict(x)?;
        Ok((self.rhythm.predict(&h)?, self.qa.predict(&h)?))
    }

    pub fn infer_batch(&self, rows: &[&[f32]]) -> Result<Vec<Prediction>> {
        let (pr, pq) = self.predict_tensors(&input_tensor(rows)?)?;
        let out: Vec<Prediction> = (0..rows.len())
            .map(|b| {
                let r = pr.item(b);
                let q = pq.item(b);
                Prediction {
                    rhythm_probs: [r[0].to_f64_lossy(), r[1].to_f64_lossy()],
                    qa_probs: [q[0].to_f64_lossy(), q[1].to_f64_lossy(), q[2].to_f64_lossy()],
                }
            })
            .collect();
        for p in &out {
            p.validate()?;
        }
        Ok(out)
    }

    /// Deterministic prediction for one window (dropout off, running
    /// batch-norm statistics).
    pub fn infer(&self, w: &Window) -> Result<Prediction> {
        w.validate()?;
        Ok(self.infer_batch(&[&w.samples])?.remove(0))
    }

    /// Predictions in chunks of `batch` windows.
    pub fn infer_all(&self, windows: &[Window], batch: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(batch.max(1)) {
            let rows: Vec<&[f32]> = chunk.iter().map(|w| w.samples.as_slice()).collect();
            out.extend(self.infer_batch(&rows)?);
        }
        Ok(out)
    }

    /// Inference-mode `(CE_rhythm, CE_qa, rhythm accuracy)` over labeled windows.
    pub fn evaluate_losses(&self, windows: &[Window], batch: usize) -> Result<(f64, f64, f64)> {
        let (mut lr, mut lq, mut hits) = (0.0, 0.0, 0usize);
        for chunk in windows.chunks(batch.max(1)) {
            let refs: Vec<&Window> = chunk.iter().collect();
            let rows: Vec<&[f32]> = chunk.iter().map(|w| w.samples.as_slice()).collect();
            let (tr, tq) = targets::<T>(&refs)?;
            let (pr, pq) = self.predict_tensors(&input_tensor(&rows)?)?;
            lr += cross_entropy(&pr, &tr)? * chunk.len() as f64;
            lq += cross_entropy(&pq, &tq)? * chunk.len() as f64;
            for (b, w) in chunk.iter().enumerate() {
                let p = pr.item(b);
                let pred = if p[1] > p[0] { RhythmClass::Af } else { RhythmClass::Sinus };
                hits += usize::from(Some(pred) == w.rhythm);
            }
        }
        let n = windows.len() as f64;
        Ok((lr / n, lq / n, hits as f64 / n))
    }
}

/// Fine-tune on labeled windows, keeping the weights with the lowest total
/// validation loss.
pub fn train_deepbeat<T: Scalar>(model: &mut DeepBeatModel<T>, train: &[Window], val: &[Window], cfg: &TrainConfig) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs train and validation windows, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    if cfg.batch_size == 0 || !(cfg.lambda_qa >= 0.0) {
        return Err(Error::Config("batch_size must be >= 1 and lambda_qa >= 0".into()));
    }
    let train_subjects: std::collections::HashSet<&str> = train.iter().map(|w| w.subject_id.as_str()).collect();
    if let Some(w) = val.iter().find(|w| train_subjects.contains(w.subject_id.as_str())) {
        return Err(Error::Data(format!("subject {} appears in both train and validation", w.subject_id)));
    }
    for w in train.iter().chain(val) {
        w.validate()?;
        if w.rhythm.is_none() || w.qa.is_none() {
            return Err(Error::Data(format!("window from subject {} lacks labels", w.subject_id)));
        }
    }

    let mut adam = [
        AdamState::new(&model.trunk, cfg.adam),
        AdamState::new(&model.rhythm, cfg.adam),
        AdamState::new(&model.qa, cfg.adam),
    ];
    let mut schedule = PlateauSchedule::new(cfg.adam.lr, cfg.patience, cfg.lr_factor, cfg.min_lr);
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step_idx = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr;
        adam.iter_mut().for_each(|a| a.config.lr = lr);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let (mut sr, mut sq) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &train[i]).collect();
            let rows: Vec<&[f32]> = batch.iter().map(|w| w.samples.as_slice()).collect();
            let (tr, tq) = targets::<T>(&batch)?;
            let step = model.step(&input_tensor(&rows)?, &tr, &tq, cfg.lambda_qa, mix_seed(cfg.seed ^ 0xDB, step_idx))?;
            if !(step.rhythm_loss.is_finite() && step.qa_loss.is_finite()) {
                return Err(Error::Numeric {
                    layer: "rhythm_out/qa_out".into(),
                    detail: format!("loss not finite at epoch {epoch}"),
                });
            }
            adam[0].step(&mut model.trunk, &step.trunk_grads)?;
            adam[1].step(&mut model.rhythm, &step.rhythm_grads)?;
            adam[2].step(&mut model.qa, &step.qa_grads)?;
            model.trunk.commit(&step.tapes[0]);
            model.rhythm.commit(&step.tapes[1]);
            model.qa.commit(&step.tapes[2]);
            sr += step.rhythm_loss * chunk.len() as f64;
            sq += step.qa_loss * chunk.len() as f64;
            step_idx += 1;
        }
        let n = train.len() as f64;
        let (vr, vq, acc) = model.evaluate_losses(val, 128)?;
        let val_total = vr + cfg.lambda_qa * vq;
        let record = DeepBeatEpoch {
            epoch,
            train_rhythm: sr / n,
            train_qa: sq / n,
            train_total: (sr + cfg.lambda_qa * sq) / n,
            val_rhythm: vr,
            val_qa: vq,
            val_total,
            val_rhythm_accuracy: acc,
            lr,
        };
        model.history.push(record);
        if schedule.observe(val_total) {
            best = model.clone();
        }
    }
    let history = std::mem::take(&mut model.history);
    *model = best;
    model.history = history;
    model.trained = true;
    Ok(())
}
