use serde::Serialize;

use super::layer::{Cache, Layer, LayerSpec, Mode, Upstream};
use super::optim::he_init;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-layer, per-parameter gradients. `None` marks frozen or
/// non-trainable parameters.
pub type Grads<T> = Vec<Vec<Option<Tensor<T>>>>;

/// Forward-pass record consumed by [`Sequential::backward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// Seed for layer `idx` derived from a step seed (splitmix64 finalizer).
pub(crate) fn mix_seed(seed: u64, idx: u64) -> u64 {
    let mut z = seed.wrapping_add(idx.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line of a layer table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

/// `(None, 800, 64)` style rendering of a per-sample shape.
pub fn keras_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("(None, {})", dims.join(", "))
}

/// Layer table of a stack without allocating its parameters.
pub fn describe(input_shape: &[usize], specs: &[(String, LayerSpec)]) -> Result<Vec<LayerRow>> {
    let mut shape = input_shape.to_vec();
    let mut rows = Vec::with_capacity(specs.len());
    for (name, spec) in specs {
        let params = spec.param_count(&shape);
        shape = spec.output_shape(&shape)?;
        rows.push(LayerRow {
            name: name.clone(),
            kind: spec.kind_name(),
            output_shape: shape.clone(),
            params,
        });
    }
    Ok(rows)
}

/// A linear stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> Sequential<T> {
    /// Build a stack with zero parameters; call [`Sequential::init_he`] to
    /// draw weights.
    pub fn new(input_shape: &[usize], specs: Vec<(String, LayerSpec)>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (name, spec) in specs {
            let layer = Layer::new(name, spec, &shape)?;
            shape = layer.output_shape().to_vec();
            layers.push(layer);
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
        })
    }

    /// He-normal kernels, zero biases; each layer draws from its own stream.
    pub fn init_he(&mut self, seed: u64) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            if matches!(layer.spec, LayerSpec::Conv1D { .. } | LayerSpec::Dense { .. }) {
                let fan_in = layer.spec.fan_in(layer.input_shape());
                let shape = layer.params[0].shape().to_vec();
                layer.params[0] = he_init(&shape, fan_in, mix_seed(seed, idx as u64));
                layer.params[1].data_mut().iter_mut().for_each(|b| *b = T::zero());
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| l.output_shape())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn rows(&self) -> Vec<LayerRow> {
        self.layers
            .iter()
            .map(|l| LayerRow {
                name: l.name.clone(),
                kind: l.spec.kind_name(),
                output_shape: l.output_shape().to_vec(),
                params: l.param_count(),
            })
            .collect()
    }

    /// Inference-mode output of layers `..end`.
    pub fn predict_prefix(&self, x: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers[..end.min(self.layers.len())] {
            cur = layer.forward(&cur, Mode::Infer, 0)?.0;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode, seed: u64) -> Result<(Tensor<T>, Tape<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&cur, mode, mix_seed(seed, idx as u64))?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, Tape { caches }))
    }

    /// Inference-mode forward without recording.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, Mode::Infer, 0)?.0;
        }
        Ok(cur)
    }

    /// Inference-mode outputs of every layer, in order.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outs.last().unwrap_or(x);
            outs.push(layer.forward(input, Mode::Infer, 0)?.0);
        }
        Ok(outs)
    }

    /// Apply running-statistic updates recorded by a training forward pass.
    pub fn commit(&mut self, tape: &Tape<T>) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            layer.update_running_stats(cache);
        }
    }

    pub fn backward(&self, tape: &Tape<T>, upstream: Upstream<T>, need_input_grad: bool) -> Result<(Option<Tensor<T>>, Grads<T>)> {
        self.backward_until(tape, upstream, 0, need_input_grad)
    }

    /// Backpropagate through layers `stop..` only. The returned input
    /// gradient is taken at the input of layer `stop`.
    pub fn backward_until(
        &self,
        tape: &Tape<T>,
        upstream: Upstream<T>,
        stop: usize,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Grads<T>)> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::State("tape does not belong to this network".into()));
        }
        let mut grads: Grads<T> = self.layers.iter().map(|l| vec![None; l.params.len()]).collect();
        let mut up = Some(upstream);
        let mut dx = None;
        for idx in (stop..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let need = idx > stop || need_input_grad;
            let (d, g) = layer.backward(&tape.caches[idx], up.take().expect("upstream"), need)?;
            for (pi, t) in g.iter().enumerate() {
                if let Some(t) = t {
                    if !t.is_finite() {
                        return Err(Error::Numeric {
                            layer: layer.name.clone(),
                            detail: format!("gradient of parameter {pi}"),
                        });
                    }
                }
            }
            if let Some(d) = &d {
                if !d.is_finite() {
                    return Err(Error::Numeric {
                        layer: layer.name.clone(),
                        detail: "input gradient".into(),
                    });
                }
            }
            grads[idx] = g;
            if idx > stop {
                up = Some(Upstream::Output(d.expect("input gradient requested")));
            } else {
                dx = d;
            }
        }
        if stop >= self.layers.len() {
            dx = up.map(|u| match u {
                Upstream::Output(t) | Upstream::PreActivation(t) => t,
            });
        }
        Ok((dx, grads))
    }

    pub fn set_frozen(&mut self, range: std::ops::Range<usize>, frozen: bool) {
        for layer in &mut self.layers[range] {
            layer.frozen = frozen;
        }
    }

    /// All parameter tensors with `layer.param` names, in declaration order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for (name, t) in layer.param_names().into_iter().zip(&layer.params) {
                out.push((format!("{}.{}", layer.name, name), t));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let names = layer.param_names();
            let lname = layer.name.clone();
            for (name, t) in names.into_iter().zip(layer.params.iter_mut()) {
                out.push((format!("{lname}.{name}"), t));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params.iter().all(Tensor::is_finite))
    }
}
