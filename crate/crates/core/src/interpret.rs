//! Gradient-weighted class activation maps and rhythm-branch embeddings.
//!
//! The network has no global average pooling, so the map is built from the
//! gradient of the class probability with respect to a convolutional
//! activation `A[t, c]`: channel weights are the time-averaged gradients,
//! the weighted sum over channels is rectified, stretched linearly to 800
//! samples and scaled so its maximum is 1.

use serde::{Deserialize, Serialize};

use crate::cdae::input_tensor;
use crate::deepbeat::{DeepBeatModel, RHYTHM_EMBEDDING, RHYTHM_LAST_CONV, SHARED_LAST_CONV};
use crate::dsp::{Window, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::neuro::{Mode, Tensor, Upstream};
use crate::scalar::Scalar;
use crate::sim::RhythmClass;

/// Which convolution the map is taken at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamLayer {
    /// Last rhythm-branch convolution. In both profiles its output has a
    /// single time step, so the map is constant over the window.
    #[default]
    Rhythm,
    /// Last convolution of the shared block.
    Shared,
    /// Last encoder convolution.
    Encoder,
}

impl CamLayer {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rhythm" => Some(Self::Rhythm),
            "shared" => Some(Self::Shared),
            "encoder" => Some(Self::Encoder),
            _ => None,
        }
    }
}

const ENCODER_LAST_CONV: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub scores: Vec<f64>,
    pub class: RhythmClass,
    pub window_id: String,
}

fn require_trained<T>(model: &DeepBeatModel<T>) -> Result<()> {
    if model.trained {
        Ok(())
    } else {
        Err(Error::State("model has not been trained".into()))
    }
}

/// Activation at the target layer and the gradient of `P(class)` there,
/// both `[1, L, C]`.
fn activation_and_grad<T: Scalar>(
    model: &DeepBeatModel<T>,
    x: &Tensor<T>,
    class: RhythmClass,
    layer: CamLayer,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, trunk_tape) = model.trunk.forward(x, Mode::Infer, 0)?;
    let (p, rhythm_tape) = model.rhythm.forward(&h, Mode::Infer, 0)?;
    let mut seed = Tensor::zeros(p.shape().to_vec());
    seed.data_mut()[class.index()] = T::one();
    let up = Upstream::Output(seed);
    match layer {
        CamLayer::Rhythm => {
            let act = model.rhythm.predict_prefix(&h, RHYTHM_LAST_CONV + 1)?;
            let (g, _) = model.rhythm.backward_until(&rhythm_tape, up, RHYTHM_LAST_CONV + 1, true)?;
            Ok((act, g.expect("input gradient")))
        }
        CamLayer::Shared | CamLayer::Encoder => {
            let stop = if layer == CamLayer::Shared { SHARED_LAST_CONV } else { ENCODER_LAST_CONV };
            let (dh, _) = model.rhythm.backward(&rhythm_tape, up, true)?;
            let act = model.trunk.predict_prefix(x, stop + 1)?;
            let (g, _) = model.trunk.backward_until(&trunk_tape, Upstream::Output(dh.expect("input gradient")), stop + 1, true)?;
            Ok((act, g.expect("input gradient")))
        }
    }
}

/// Stretch `x` to `n` samples by linear interpolation between sample centres.
pub fn upsample_linear(x: &[f64], n: usize) -> Vec<f64> {
    let m = x.len();
    if m == 1 {
        return vec![x[0]; n];
    }
    (0..n)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * m as f64 / n as f64 - 0.5).clamp(0.0, (m - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            let f = pos - lo as f64;
            x[lo] * (1.0 - f) + x[hi] * f
        })
        .collect()
}

/// Class activation map of `w` for `class`.
pub fn saliency<T: Scalar>(model: &DeepBeatModel<T>, w: &Window, class: RhythmClass, layer: CamLayer) -> Result<SaliencyMap> {
    require_trained(model)?;
    w.validate()?;
    let x = input_tensor::<T>(&[&w.samples])?;
    let (act, grad) = activation_and_grad(model, &x, class, layer)?;
    let (len, ch) = (act.shape()[1], act.shape()[2]);
    let a = act.to_f64_vec();
    let g = grad.to_f64_vec();
    let weights: Vec<f64> = (0..ch).map(|c| (0..len).map(|t| g[t * ch + c]).sum::<f64>() / len as f64).collect();
    let cam: Vec<f64> = (0..len)
        .map(|t| (0..ch).map(|c| weights[c] * a[t * ch + c]).sum::<f64>().max(0.0))
        .collect();
    let mut scores = upsample_linear(&cam, WINDOW_LEN);
    let peak = scores.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        scores.iter_mut().for_each(|s| *s /= peak);
    }
    Ok(SaliencyMap {
        scores,
        class,
        window_id: w.id(),
    })
}

/// Rhythm-branch dense activations, one row per window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub window_ids: Vec<String>,
    pub labels: Vec<Option<RhythmClass>>,
    pub rows: Vec<Vec<f64>>,
}

pub fn export_embeddings<T: Scalar>(model: &DeepBeatModel<T>, windows: &[Window], batch: usize) -> Result<Embeddings> {
    require_trained(model)?;
    let mut rows = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch.max(1)) {
        for w in chunk {
            w.validate()?;
        }
        let refs: Vec<&[f32]> = chunk.iter().map(|w| w.samples.as_slice()).collect();
        let h = model.trunk.predict(&input_tensor(&refs)?)?;
        let e = model.rhythm.predict_prefix(&h, RHYTHM_EMBEDDING + 1)?;
        rows.extend((0..chunk.len()).map(|b| e.item(b).iter().map(|v| v.to_f64_lossy()).collect::<Vec<f64>>()));
    }
    Ok(Embeddings {
        window_ids: windows.iter().map(Window::id).collect(),
        labels: windows.iter().map(|w| w.rhythm).collect(),
        rows,
    })
}
