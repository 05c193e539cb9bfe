//! Convolutional denoising autoencoder and its pretraining loop.
//!
//! Kernel, pool and upsample sizes follow from the layer table: with one
//! input channel `(k + 1) * 64 = 704` gives `k = 10`, `(8 * 64 + 1) * 45 =
//! 23,085` gives `k = 8`, `(5 * 45 + 1) * 50 = 11,300` gives `k = 5`, and the
//! lengths 800 -> 266 -> 88 -> 44 -> 88 -> 264 -> 792 fix the pools (3, 3, 2)
//! and upsampling factors (2, 3, 3). The decoder mirrors the kernels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{Window, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::neuro::{mix_seed, mse_loss, Activation, AdamConfig, AdamState, LayerSpec, Mode, Padding, PlateauSchedule, Sequential, Tensor, Upstream};
use crate::scalar::Scalar;

/// Layers `..ENCODER_DEPTH` form the encoder (three conv + pool pairs).
pub const ENCODER_DEPTH: usize = 6;
/// Indices of the encoder convolutions.
pub const ENCODER_CONVS: [usize; 3] = [0, 2, 4];

/// Channel widths. `Paper` reproduces the published tables; `Mini` keeps
/// the topology with conv widths divided by four (rounded up).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Paper,
    Mini,
}

impl Profile {
    pub fn width(self, channels: usize) -> usize {
        match self {
            Profile::Paper => channels,
            Profile::Mini => channels.div_ceil(4),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Mini => "mini",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Some(Profile::Paper),
            "mini" => Some(Profile::Mini),
            _ => None,
        }
    }
}

fn conv_relu(filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::conv(filters, kernel, 1, Padding::Same, Activation::Relu)
}

/// Encoder layers shared with the classifier.
pub fn encoder_specs(profile: Profile) -> Vec<(String, LayerSpec)> {
    let w = |c| profile.width(c);
    vec![
        ("enc_conv1".into(), conv_relu(w(64), 10)),
        ("enc_pool1".into(), LayerSpec::MaxPool1D { pool: 3 }),
        ("enc_conv2".into(), conv_relu(w(45), 8)),
        ("enc_pool2".into(), LayerSpec::MaxPool1D { pool: 3 }),
        ("enc_conv3".into(), conv_relu(w(50), 5)),
        ("enc_pool3".into(), LayerSpec::MaxPool1D { pool: 2 }),
    ]
}

pub fn cdae_specs(profile: Profile) -> Vec<(String, LayerSpec)> {
    let w = |c| profile.width(c);
    let mut specs = encoder_specs(profile);
    specs.extend([
        ("dec_conv1".into(), conv_relu(w(50), 5)),
        ("dec_up1".into(), LayerSpec::UpSample1D { factor: 2 }),
        ("dec_conv2".into(), conv_relu(w(45), 8)),
        ("dec_up2".into(), LayerSpec::UpSample1D { factor: 3 }),
        ("dec_conv3".into(), conv_relu(w(64), 10)),
        ("dec_up3".into(), LayerSpec::UpSample1D { factor: 3 }),
        ("flatten".into(), LayerSpec::Flatten),
        ("reconstruction".into(), LayerSpec::dense(WINDOW_LEN, Activation::Linear)),
    ]);
    specs
}

pub const INPUT_SHAPE: [usize; 2] = [WINDOW_LEN, 1];

/// Stack `[0, 1]` windows into a `[B, 800, 1]` batch.
pub fn input_tensor<T: Scalar>(rows: &[&[f32]]) -> Result<Tensor<T>> {
    if rows.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * WINDOW_LEN);
    for r in rows {
        if r.len() != WINDOW_LEN {
            return Err(Error::Shape(format!("window must hold {WINDOW_LEN} samples, got {}", r.len())));
        }
        data.extend(r.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![rows.len(), WINDOW_LEN, 1], data)
}

fn target_tensor<T: Scalar>(rows: &[&[f32]]) -> Result<Tensor<T>> {
    input_tensor::<T>(rows)?.reshape(vec![rows.len(), WINDOW_LEN])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdaeEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdaeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for CdaeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 25,
            lr_factor: 0.1,
            min_lr: 1e-6,
            seed: 0,
        }
    }
}

/// A noisy input window and the clean window it should reconstruct.
pub type Pair<'a> = (&'a [f32], &'a [f32]);

#[derive(Clone, Debug, PartialEq)]
pub struct CdaeModel<T> {
    pub net: Sequential<T>,
    pub profile: Profile,
    pub seed: u64,
    pub history: Vec<CdaeEpoch>,
}

pub fn build_cdae<T: Scalar>(seed: u64, profile: Profile) -> Result<CdaeModel<T>> {
    let mut net = Sequential::new(&INPUT_SHAPE, cdae_specs(profile))?;
    net.init_he(seed);
    Ok(CdaeModel {
        net,
        profile,
        seed,
        history: Vec::new(),
    })
}

impl<T: Scalar> CdaeModel<T> {
    /// Per-sample latent shape (`[44, 50]` for the paper profile).
    pub fn latent_shape(&self) -> &[usize] {
        self.net.layers[ENCODER_DEPTH - 1].output_shape()
    }

    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.predict_prefix(x, ENCODER_DEPTH)
    }

    /// Output of the third pooling layer for one window.
    pub fn encode(&self, w: &Window) -> Result<Tensor<T>> {
        w.validate()?;
        let z = self.encode_batch(&input_tensor(&[&w.samples])?)?;
        z.reshape(self.latent_shape().to_vec())
    }

    pub fn denoise_batch(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        let y = self.net.predict(&input_tensor(rows)?)?;
        if !y.is_finite() {
            return Err(Error::Numeric {
                layer: "reconstruction".into(),
                detail: "non-finite output".into(),
            });
        }
        Ok((0..y.batch()).map(|b| y.item(b).iter().map(|v| v.to_f64_lossy()).collect()).collect())
    }

    pub fn denoise(&self, noisy: &Window) -> Result<Vec<f64>> {
        noisy.validate()?;
        Ok(self.denoise_batch(&[&noisy.samples])?.remove(0))
    }

    /// Mean reconstruction MSE against the clean targets, in batches.
    pub fn reconstruction_mse(&self, pairs: &[Pair], batch: usize) -> Result<f64> {
        let mut total = 0.0;
        for chunk in pairs.chunks(batch.max(1)) {
            let noisy: Vec<&[f32]> = chunk.iter().map(|p| p.0).collect();
            let clean: Vec<&[f32]> = chunk.iter().map(|p| p.1).collect();
            let y = self.net.predict(&input_tensor(&noisy)?)?;
            let (loss, _) = mse_loss(&y, &target_tensor(&clean)?)?;
            total += loss * chunk.len() as f64;
        }
        Ok(total / pairs.len() as f64)
    }
}

/// Minimize reconstruction MSE with Adam, reducing the learning rate on
/// validation plateaus. The weights with the lowest validation MSE are kept.
pub fn pretrain<T: Scalar>(model: &mut CdaeModel<T>, train: &[Pair], val: &[Pair], cfg: &CdaeConfig) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "pretraining needs train and validation pairs, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut adam = AdamState::new(&model.net, cfg.adam);
    let mut schedule = PlateauSchedule::new(cfg.adam.lr, cfg.patience, cfg.lr_factor, cfg.min_lr);
    let mut best = model.net.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr;
        adam.config.lr = lr;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let noisy: Vec<&[f32]> = chunk.iter().map(|&i| train[i].0).collect();
            let clean: Vec<&[f32]> = chunk.iter().map(|&i| train[i].1).collect();
            let (y, tape) = model.net.forward(&input_tensor(&noisy)?, Mode::Train, mix_seed(cfg.seed ^ 0xCDAE, step))?;
            let (loss, grad) = mse_loss(&y, &target_tensor(&clean)?)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    layer: "reconstruction".into(),
                    detail: format!("loss {loss} at epoch {epoch}"),
                });
            }
            let (_, grads) = model.net.backward(&tape, Upstream::Output(grad), false)?;
            adam.step(&mut model.net, &grads)?;
            model.net.commit(&tape);
            sum += loss * chunk.len() as f64;
            step += 1;
        }
        let val_mse = model.reconstruction_mse(val, 64)?;
        if schedule.observe(val_mse) {
            best = model.net.clone();
        }
        model.history.push(CdaeEpoch {
            epoch,
            train_mse: sum / train.len() as f64,
            val_mse,
            lr,
        });
    }
    model.net = best;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuro::describe;

    #[test]
    fn paper_table_shapes_and_counts() {
        let rows = describe(&INPUT_SHAPE, &cdae_specs(Profile::Paper)).unwrap();
        let expected: [(&str, &[usize], usize); 14] = [
            ("Conv1D", &[800, 64], 704),
            ("MaxPooling", &[266, 64], 0),
            ("Conv1D", &[266, 45], 23_085),
            ("MaxPooling", &[88, 45], 0),
            ("Conv1D", &[88, 50], 11_300),
            ("MaxPooling", &[44, 50], 0),
            ("Conv1D", &[44, 50], 12_550),
            ("UpSampling", &[88, 50], 0),
            ("Conv1D", &[88, 45], 18_045),
            ("UpSampling", &[264, 45], 0),
            ("Conv1D", &[264, 64], 28_864),
            ("UpSampling", &[792, 64], 0),
            ("Flatten", &[50_688], 0),
            ("Dense", &[800], 40_551_200),
        ];
        assert_eq!(rows.len(), expected.len());
        for (row, (kind, shape, params)) in rows.iter().zip(&expected) {
            assert_eq!((row.kind, row.output_shape.as_slice(), row.params), (*kind, *shape, *params));
        }
        assert_eq!(rows.iter().map(|r| r.params).sum::<usize>(), 40_645_748);
    }

    #[test]
    fn mini_profile_quarters_conv_widths() {
        let rows = describe(&INPUT_SHAPE, &cdae_specs(Profile::Mini)).unwrap();
        assert_eq!(rows[5].output_shape, vec![44, 13]);
        assert_eq!(rows[12].output_shape, vec![792 * 16]);
        assert_eq!(rows[13].output_shape, vec![800]);
    }

    #[test]
    fn encode_and_denoise_shapes() {
        let m = build_cdae::<f32>(1, Profile::Mini).unwrap();
        let w = Window::new((0..800).map(|i| (i % 32) as f32 / 31.0).collect(), "s").unwrap();
        assert_eq!(m.encode(&w).unwrap().shape(), &[44, 13]);
        assert_eq!(m.denoise(&w).unwrap().len(), 800);
        assert!(m.encode(&w).unwrap().data() == m.encode(&w).unwrap().data());
    }

    #[test]
    fn distinct_windows_get_distinct_latents() {
        let m = build_cdae::<f32>(2, Profile::Mini).unwrap();
        let a = Window::new((0..800).map(|i| ((i as f32) * 0.2).sin() * 0.5 + 0.5).collect(), "a").unwrap();
        let b = Window::new((0..800).map(|i| ((i as f32) * 0.05).cos() * 0.5 + 0.5).collect(), "b").unwrap();
        assert!(m.encode(&a).unwrap().max_abs_diff(&m.encode(&b).unwrap()) > 0.0);
    }

    #[test]
    fn wrong_length_is_a_shape_error() {
        let m = build_cdae::<f32>(1, Profile::Mini).unwrap();
        let short = vec![0.5f32; 799];
        assert!(matches!(m.denoise_batch(&[&short]), Err(Error::Shape(_))));
    }

    #[test]
    fn flat_validation_loss_decays_lr_every_patience_epochs() {
        let mut s = PlateauSchedule::new(1e-3, 25, 0.1, 1e-6);
        let mut reductions = Vec::new();
        for epoch in 0..80 {
            let before = s.lr;
            s.observe(1.0);
            if s.lr < before {
                reductions.push(epoch);
            }
        }
        assert_eq!(reductions, vec![25, 50, 75]);
        let mut floor = PlateauSchedule::new(1e-5, 1, 0.1, 1e-6);
        for _ in 0..5 {
            floor.observe(1.0);
        }
        assert_eq!(floor.lr, 1e-6);
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let mut m = build_cdae::<f32>(1, Profile::Mini).unwrap();
        let cfg = CdaeConfig::default();
        assert!(matches!(pretrain(&mut m, &[], &[], &cfg), Err(Error::Config(_))));
    }
}
