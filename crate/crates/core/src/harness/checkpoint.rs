//! Model checkpoints: a directory with `manifest.json` (kind, profile,
//! layer list, tensor table, training config, history) and `weights.bin`
//! (named tensors in declaration order, little-endian f32).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32_bytes, f32_values, read_file, sha256_hex, write_atomic};
use crate::baseline::{Ensemble, Forest, Node, Tree};
use crate::cdae::{build_cdae, CdaeModel, Profile};
use crate::deepbeat::{build_deepbeat, Arch, DeepBeatModel};
use crate::error::{Error, Result};
use crate::neuro::{LayerSpec, Sequential};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "deepbeat-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cdae,
    Deepbeat,
    Forest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub net: String,
    pub name: String,
    pub spec: LayerSpec,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Position of the first value in `weights.bin`, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    pub seed: u64,
    pub dtype: String,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default)]
    pub trained: bool,
    pub layers: Vec<LayerEntry>,
    pub tensors: Vec<TensorEntry>,
    pub n_values: usize,
    pub weights_sha256: String,
    #[serde(default)]
    pub training: serde_json::Value,
    #[serde(default)]
    pub history: serde_json::Value,
}

/// A model read back from disk (weights are 32-bit on disk).
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Cdae(CdaeModel<f32>),
    DeepBeat(DeepBeatModel<f32>),
    Forest(Forest),
}

/// Tensors of a checkpoint being assembled.
#[derive(Default)]
struct Blob {
    entries: Vec<TensorEntry>,
    values: Vec<f32>,
}

impl Blob {
    fn push(&mut self, name: String, shape: Vec<usize>, values: impl IntoIterator<Item = f32>) {
        let offset = self.values.len();
        self.values.extend(values);
        self.entries.push(TensorEntry { name, shape, offset });
    }

    fn push_net<T: Scalar>(&mut self, net_name: &str, net: &Sequential<T>) {
        for (name, t) in net.named_params() {
            let vals = t.data().iter().map(|v| v.to_f64_lossy() as f32);
            self.push(format!("{net_name}.{name}"), t.shape().to_vec(), vals);
        }
    }
}

fn layer_entries<T: Scalar>(nets: &[(&str, &Sequential<T>)]) -> Vec<LayerEntry> {
    let mut out = Vec::new();
    for (net_name, net) in nets {
        for l in &net.layers {
            out.push(LayerEntry {
                net: net_name.to_string(),
                name: l.name.clone(),
                spec: l.spec.clone(),
                input_shape: l.input_shape().to_vec(),
                output_shape: l.output_shape().to_vec(),
            });
        }
    }
    out
}

struct Meta {
    kind: ModelKind,
    profile: Option<Profile>,
    arch: Option<Arch>,
    seed: u64,
    pretrained: bool,
    trained: bool,
    layers: Vec<LayerEntry>,
    training: serde_json::Value,
    history: serde_json::Value,
}

fn write(dir: &Path, meta: Meta, blob: Blob) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = f32_bytes(&blob.values);
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: meta.kind,
        profile: meta.profile,
        arch: meta.arch,
        seed: meta.seed,
        dtype: "f32".into(),
        pretrained: meta.pretrained,
        trained: meta.trained,
        layers: meta.layers,
        tensors: blob.entries,
        n_values: blob.values.len(),
        weights_sha256: sha256_hex(&bytes),
        training: meta.training,
        history: meta.history,
    };
    write_atomic(&dir.join("weights.bin"), &bytes)?;
    write_atomic(&dir.join("manifest.json"), (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
}

pub fn save_cdae<T: Scalar>(model: &CdaeModel<T>, training: serde_json::Value, dir: &Path) -> Result<()> {
    let mut blob = Blob::default();
    blob.push_net("cdae", &model.net);
    let meta = Meta {
        kind: ModelKind::Cdae,
        profile: Some(model.profile),
        arch: None,
        seed: model.seed,
        pretrained: false,
        trained: !model.history.is_empty(),
        layers: layer_entries(&[("cdae", &model.net)]),
        training,
        history: serde_json::to_value(&model.history)?,
    };
    write(dir, meta, blob)
}

pub fn save_deepbeat<T: Scalar>(model: &DeepBeatModel<T>, training: serde_json::Value, dir: &Path) -> Result<()> {
    let nets = [("trunk", &model.trunk), ("rhythm", &model.rhythm), ("qa", &model.qa)];
    let mut blob = Blob::default();
    for (name, net) in nets {
        blob.push_net(name, net);
    }
    let meta = Meta {
        kind: ModelKind::Deepbeat,
        profile: Some(model.profile),
        arch: Some(model.arch),
        seed: model.seed,
        pretrained: model.pretrained,
        trained: model.trained,
        layers: layer_entries(&nets),
        training,
        history: serde_json::to_value(&model.history)?,
    };
    write(dir, meta, blob)
}

fn push_ensemble(blob: &mut Blob, target: &str, e: &Ensemble) {
    let nodes: Vec<&Node> = e.trees.iter().flat_map(|t| &t.nodes).collect();
    let n = nodes.len();
    let table = nodes.iter().flat_map(|node| {
        let feature = node.feature.map_or(-1.0, |f| f as f32);
        [feature, node.threshold as f32, node.left as f32, node.right as f32]
    });
    blob.push(format!("{target}.nodes"), vec![n, 4], table.collect::<Vec<f32>>());
    let counts = nodes.iter().flat_map(|node| {
        let mut c: Vec<f32> = node.counts.iter().map(|&v| v as f32).collect();
        c.resize(e.n_classes, 0.0);
        c
    });
    blob.push(format!("{target}.counts"), vec![n, e.n_classes], counts.collect::<Vec<f32>>());
    let sizes = e.trees.iter().map(|t| t.nodes.len() as f32);
    blob.push(format!("{target}.tree_sizes"), vec![e.trees.len()], sizes.collect::<Vec<f32>>());
}

/// Forest checkpoints hold node tables; thresholds and counts are f32 values
/// already, so the roundtrip is exact.
pub fn save_forest(forest: &Forest, training: serde_json::Value, dir: &Path) -> Result<()> {
    let mut blob = Blob::default();
    push_ensemble(&mut blob, "rhythm", &forest.rhythm);
    push_ensemble(&mut blob, "qa", &forest.qa);
    let meta = Meta {
        kind: ModelKind::Forest,
        profile: None,
        arch: None,
        seed: forest.seed,
        pretrained: false,
        trained: true,
        layers: Vec::new(),
        training,
        history: serde_json::Value::Null,
    };
    write(dir, meta, blob)
}

/// Manifest and decoded weights, with every structural check done.
struct Loaded {
    manifest: CheckpointManifest,
    tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let bytes = read_file(&dir.join("manifest.json"), "manifest.json")?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::load("manifest.json", e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::load(
                "version",
                format!("unsupported checkpoint version {v} (reader supports {CHECKPOINT_VERSION})"),
            ))
        }
        None => return Err(Error::load("version", "missing")),
    }
    let m: CheckpointManifest = serde_json::from_value(value).map_err(|e| Error::load("manifest.json", e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::load("format", format!("expected `{FORMAT}`, found `{}`", m.format)));
    }
    if m.dtype != "f32" {
        return Err(Error::load("dtype", format!("unsupported weight type `{}`", m.dtype)));
    }
    Ok(m)
}

/// Kind of the checkpoint in `dir`.
pub fn checkpoint_kind(dir: &Path) -> Result<ModelKind> {
    Ok(read_manifest(dir)?.kind)
}

fn read(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    let bytes = read_file(&dir.join("weights.bin"), "weights.bin")?;
    if manifest.n_values.checked_mul(4) != Some(bytes.len()) {
        return Err(Error::load(
            "weights.bin",
            format!("{} bytes do not hold the {} declared values (truncated or padded)", bytes.len(), manifest.n_values),
        ));
    }
    if sha256_hex(&bytes) != manifest.weights_sha256 {
        return Err(Error::load("weights.bin", "checksum mismatch: blob is corrupt"));
    }
    let values = f32_values(&bytes, "weights.bin")?;
    let mut tensors = HashMap::new();
    for (i, t) in manifest.tensors.iter().enumerate() {
        let len = t.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let end = len.and_then(|l| t.offset.checked_add(l)).filter(|&e| e <= values.len());
        let Some(end) = end else {
            return Err(Error::load(format!("tensors[{i}]"), format!("{} runs past the end of weights.bin", t.name)));
        };
        if tensors.insert(t.name.clone(), (t.shape.clone(), values[t.offset..end].to_vec())).is_some() {
            return Err(Error::load(format!("tensors[{i}]"), format!("{} listed twice", t.name)));
        }
    }
    Ok(Loaded { manifest, tensors })
}

impl Loaded {
    fn check_layers<T: Scalar>(&self, nets: &[(&str, &Sequential<T>)]) -> Result<()> {
        let want = layer_entries(nets);
        if want.len() != self.manifest.layers.len() {
            return Err(Error::load(
                "layers",
                format!("expected {} layers, found {}", want.len(), self.manifest.layers.len()),
            ));
        }
        for (i, (w, got)) in want.iter().zip(&self.manifest.layers).enumerate() {
            if w != got {
                return Err(Error::load(
                    format!("layers[{i}]"),
                    format!("{}.{} {:?} on {:?} does not match {:?} on {:?}", got.net, got.name, got.spec, got.input_shape, w.spec, w.input_shape),
                ));
            }
        }
        Ok(())
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (s, v) = self.tensors.remove(name).ok_or_else(|| Error::load("tensors", format!("{name} missing")))?;
        if s != shape {
            return Err(Error::load("tensors", format!("{name} has shape {s:?}, expected {shape:?}")));
        }
        Ok(v)
    }

    fn fill<T: Scalar>(&mut self, net_name: &str, net: &mut Sequential<T>) -> Result<()> {
        for (name, t) in net.named_params_mut() {
            let v = self.take(&format!("{net_name}.{name}"), &t.shape().to_vec())?;
            for (dst, src) in t.data_mut().iter_mut().zip(v) {
                *dst = T::from_f64_lossy(src as f64);
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let mut extra: Vec<&String> = self.tensors.keys().collect();
        extra.sort();
        match extra.first() {
            Some(name) => Err(Error::load("tensors", format!("unexpected tensor {name}"))),
            None => Ok(()),
        }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::load("kind", format!("expected {kind:?}, found {:?}", self.manifest.kind)));
        }
        Ok(())
    }

    fn profile(&self) -> Result<Profile> {
        self.manifest.profile.ok_or_else(|| Error::load("profile", "missing"))
    }

    fn history<H: serde::de::DeserializeOwned>(&self) -> Result<Vec<H>> {
        if self.manifest.history.is_null() {
            return Ok(Vec::new());
        }
        serde_json::from_value(self.manifest.history.clone()).map_err(|e| Error::load("history", e.to_string()))
    }
}

pub fn load_cdae<T: Scalar>(dir: &Path) -> Result<CdaeModel<T>> {
    let mut l = read(dir)?;
    l.expect_kind(ModelKind::Cdae)?;
    let mut model = build_cdae::<T>(l.manifest.seed, l.profile()?)?;
    l.check_layers(&[("cdae", &model.net)])?;
    l.fill("cdae", &mut model.net)?;
    model.history = l.history()?;
    l.finish()?;
    Ok(model)
}

pub fn load_deepbeat<T: Scalar>(dir: &Path) -> Result<DeepBeatModel<T>> {
    let mut l = read(dir)?;
    l.expect_kind(ModelKind::Deepbeat)?;
    let arch = l.manifest.arch.ok_or_else(|| Error::load("arch", "missing"))?;
    let mut m = build_deepbeat::<T>(l.manifest.seed, None, l.profile()?, arch)?;
    l.check_layers(&[("trunk", &m.trunk), ("rhythm", &m.rhythm), ("qa", &m.qa)])?;
    l.fill("trunk", &mut m.trunk)?;
    l.fill("rhythm", &mut m.rhythm)?;
    l.fill("qa", &mut m.qa)?;
    m.pretrained = l.manifest.pretrained;
    m.trained = l.manifest.trained;
    m.history = l.history()?;
    l.finish()?;
    Ok(m)
}

fn as_index(v: f32, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
        Ok(v as usize)
    } else {
        Err(Error::load("tensors", format!("{what} = {v} is not an index")))
    }
}

fn take_ensemble(l: &mut Loaded, target: &str, n_classes: usize) -> Result<Ensemble> {
    let sizes_entry = l
        .tensors
        .get(&format!("{target}.tree_sizes"))
        .ok_or_else(|| Error::load("tensors", format!("{target}.tree_sizes missing")))?;
    let sizes = l.take(&format!("{target}.tree_sizes"), &sizes_entry.0.clone())?;
    let sizes: Vec<usize> = sizes.iter().map(|&v| as_index(v, "tree size")).collect::<Result<_>>()?;
    let n: usize = sizes.iter().sum();
    let table = l.take(&format!("{target}.nodes"), &[n, 4])?;
    let counts = l.take(&format!("{target}.counts"), &[n, n_classes])?;
    let mut trees = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let mut nodes = Vec::with_capacity(size);
        for k in start..start + size {
            let row = &table[k * 4..k * 4 + 4];
            let feature = if row[0] == -1.0 { None } else { Some(as_index(row[0], "feature")?) };
            let (left, right) = (as_index(row[2], "left")?, as_index(row[3], "right")?);
            if feature.is_some() && (left >= size || right >= size) {
                return Err(Error::load("tensors", format!("{target} node {k} points outside its tree")));
            }
            nodes.push(Node {
                feature,
                threshold: row[1] as f64,
                left,
                right,
                counts: counts[k * n_classes..(k + 1) * n_classes].iter().map(|&c| c as f64).collect(),
            });
        }
        trees.push(Tree { nodes });
        start += size;
    }
    Ok(Ensemble { n_classes, trees })
}

pub fn load_forest(dir: &Path) -> Result<Forest> {
    let mut l = read(dir)?;
    l.expect_kind(ModelKind::Forest)?;
    let rhythm = take_ensemble(&mut l, "rhythm", 2)?;
    let qa = take_ensemble(&mut l, "qa", 3)?;
    let seed = l.manifest.seed;
    l.finish()?;
    if rhythm.trees.len() != qa.trees.len() {
        return Err(Error::load("tensors", "rhythm and qa ensembles differ in size"));
    }
    Ok(Forest {
        n_estimators: rhythm.trees.len(),
        rhythm,
        qa,
        seed,
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, SavedModel)> {
    let manifest = read_manifest(dir)?;
    let model = match manifest.kind {
        ModelKind::Cdae => SavedModel::Cdae(load_cdae(dir)?),
        ModelKind::Deepbeat => SavedModel::DeepBeat(load_deepbeat(dir)?),
        ModelKind::Forest => SavedModel::Forest(load_forest(dir)?),
    };
    Ok((manifest, model))
}
