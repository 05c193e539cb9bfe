//! Dataset bundles on disk: a directory holding
//!
//! * `manifest.json`: version, counts per partition x rhythm x QA, fs,
//!   window length, seed and blob checksums
//! * `windows.f32`: row-major `n x 800` little-endian f32 samples
//! * `clean.f32`: optional clean counterparts, same layout
//! * `labels.csv`: one row per window

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32_bytes, f32_values, read_file, sha256_hex, write_atomic};
use crate::cdae::Pair;
use crate::dsp::{QaClass, Window, GRID_FS, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::sim::{DatasetRecipe, Partition, RhythmClass};

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "deepbeat-dataset";
const LABEL_HEADER: &str = "window_id,subject_id,partition,rhythm,qa,episode_id,noise_factor";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub partition: Partition,
    pub rhythm: RhythmClass,
    pub qa: QaClass,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub n_windows: usize,
    pub window_len: usize,
    pub fs: f64,
    pub seed: u64,
    pub counts: Vec<CountRow>,
    pub has_clean: bool,
    pub windows_sha256: String,
    pub labels_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<DatasetRecipe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub window_id: String,
    pub subject_id: String,
    pub partition: Partition,
    pub rhythm: RhythmClass,
    pub qa: QaClass,
    pub episode_id: String,
    pub noise_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub manifest: DatasetManifest,
    pub windows: Vec<f32>,
    pub clean: Option<Vec<f32>>,
    pub labels: Vec<LabelRow>,
}

fn count_rows(labels: &[LabelRow]) -> Vec<CountRow> {
    let mut m: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for l in labels {
        *m.entry((l.partition as usize, l.rhythm.index(), l.qa.index())).or_default() += 1;
    }
    m.into_iter()
        .map(|((p, r, q), count)| CountRow {
            partition: Partition::ALL[p],
            rhythm: RhythmClass::from_index(r).expect("rhythm index"),
            qa: QaClass::from_index(q).expect("qa index"),
            count,
        })
        .collect()
}

fn origin_of(window_id: &str) -> Option<(String, usize)> {
    let (name, start) = window_id.rsplit_once(':')?;
    Some((name.to_string(), start.parse().ok()?))
}

impl DatasetBundle {
    /// Assemble a bundle and fill in the derived manifest fields.
    pub fn new(
        labels: Vec<LabelRow>,
        windows: Vec<f32>,
        clean: Option<Vec<f32>>,
        seed: u64,
        recipe: Option<DatasetRecipe>,
    ) -> Result<Self> {
        let manifest = DatasetManifest {
            format: FORMAT.into(),
            version: DATASET_VERSION,
            n_windows: labels.len(),
            window_len: WINDOW_LEN,
            fs: GRID_FS,
            seed,
            counts: count_rows(&labels),
            has_clean: clean.is_some(),
            windows_sha256: sha256_hex(&f32_bytes(&windows)),
            labels_sha256: sha256_hex(labels_csv(&labels)?.as_bytes()),
            clean_sha256: clean.as_ref().map(|c| sha256_hex(&f32_bytes(c))),
            recipe,
        };
        let bundle = Self {
            manifest,
            windows,
            clean,
            labels,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Check the bundle invariants; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format != FORMAT {
            return Err(Error::load("format", format!("expected `{FORMAT}`, found `{}`", m.format)));
        }
        if m.version != DATASET_VERSION {
            return Err(Error::load("version", format!("unsupported dataset version {} (reader supports {DATASET_VERSION})", m.version)));
        }
        if m.window_len != WINDOW_LEN {
            return Err(Error::load("window_len", format!("expected {WINDOW_LEN}, found {}", m.window_len)));
        }
        if self.labels.len() != m.n_windows {
            return Err(Error::load(
                "labels.csv",
                format!("manifest declares {} windows but the table has {} rows", m.n_windows, self.labels.len()),
            ));
        }
        let declared: usize = m.counts.iter().map(|c| c.count).sum();
        if declared != m.n_windows || count_rows(&self.labels) != m.counts {
            return Err(Error::load("counts", format!("manifest counts (total {declared}) disagree with the label table")));
        }
        let blobs = [("windows.f32", Some(&self.windows)), ("clean.f32", self.clean.as_ref())];
        for (field, blob) in blobs {
            let Some(blob) = blob else { continue };
            if Some(blob.len()) != m.n_windows.checked_mul(WINDOW_LEN) {
                return Err(Error::load(field, format!("{} values do not make {} windows", blob.len(), m.n_windows)));
            }
            if let Some(i) = blob.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::load(field, format!("window {} sample {} = {} outside [0, 1]", i / WINDOW_LEN, i % WINDOW_LEN, blob[i])));
            }
        }
        if m.has_clean != self.clean.is_some() {
            return Err(Error::load("has_clean", "flag disagrees with the presence of clean windows"));
        }
        let mut owner: HashMap<&str, Partition> = HashMap::new();
        let mut ids = std::collections::HashSet::new();
        for l in &self.labels {
            if origin_of(&l.window_id).is_none() || l.subject_id.is_empty() || l.episode_id.is_empty() {
                return Err(Error::load("labels.csv", format!("malformed ids in row for window `{}`", l.window_id)));
            }
            if !ids.insert(l.window_id.as_str()) {
                return Err(Error::load("labels.csv", format!("window id {} repeated", l.window_id)));
            }
            if !(l.noise_factor.is_finite() && l.noise_factor >= 0.0) {
                return Err(Error::load("labels.csv", format!("window {}: noise factor {}", l.window_id, l.noise_factor)));
            }
            if *owner.entry(&l.subject_id).or_insert(l.partition) != l.partition {
                return Err(Error::load("labels.csv", format!("subject {} appears in more than one partition", l.subject_id)));
            }
        }
        Ok(())
    }

    /// Row indices of `partition`, in table order.
    pub fn rows(&self, partition: Option<Partition>) -> Vec<usize> {
        (0..self.len()).filter(|&i| partition.is_none_or(|p| self.labels[i].partition == p)).collect()
    }

    pub fn samples(&self, row: usize) -> &[f32] {
        &self.windows[row * WINDOW_LEN..(row + 1) * WINDOW_LEN]
    }

    pub fn window(&self, row: usize) -> Window {
        let l = &self.labels[row];
        Window {
            samples: self.samples(row).to_vec(),
            fs_effective: self.manifest.fs,
            rhythm: Some(l.rhythm),
            qa: Some(l.qa),
            subject_id: l.subject_id.clone(),
            origin: origin_of(&l.window_id).expect("validated window id"),
        }
    }

    pub fn windows_of(&self, partition: Option<Partition>) -> Vec<Window> {
        self.rows(partition).into_iter().map(|i| self.window(i)).collect()
    }

    /// `(noisy, clean)` pairs of the given rows.
    pub fn pairs(&self, rows: &[usize]) -> Result<Vec<Pair<'_>>> {
        let clean = self.clean.as_ref().ok_or_else(|| Error::Data("dataset has no clean windows".into()))?;
        Ok(rows
            .iter()
            .map(|&i| (self.samples(i), &clean[i * WINDOW_LEN..(i + 1) * WINDOW_LEN]))
            .collect())
    }

    /// `sha256` of the serialized manifest, used to identify inputs of a run.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&manifest_bytes(&self.manifest)?))
    }
}

fn manifest_bytes(m: &DatasetManifest) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(m)? + "\n").into_bytes())
}

fn labels_csv(labels: &[LabelRow]) -> Result<String> {
    let mut out = String::from(LABEL_HEADER);
    out.push('\n');
    for l in labels {
        for s in [&l.window_id, &l.subject_id, &l.episode_id] {
            if s.contains([',', '\n', '\r']) {
                return Err(Error::Data(format!("id `{s}` contains a delimiter")));
            }
        }
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            l.window_id,
            l.subject_id,
            l.partition.as_str(),
            l.rhythm.as_str(),
            l.qa.as_str(),
            l.episode_id,
            l.noise_factor
        );
    }
    Ok(out)
}

fn parse_labels(text: &str) -> Result<Vec<LabelRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LABEL_HEADER) {
        return Err(Error::load("labels.csv", format!("header must be `{LABEL_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row = i + 2;
            let bad = |col: &str, v: &str| Error::load("labels.csv", format!("line {row}: bad {col} `{v}`"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::load("labels.csv", format!("line {row}: expected 7 columns, found {}", f.len())));
            }
            Ok(LabelRow {
                window_id: f[0].to_string(),
                subject_id: f[1].to_string(),
                partition: Partition::parse(f[2]).ok_or_else(|| bad("partition", f[2]))?,
                rhythm: RhythmClass::parse(f[3]).ok_or_else(|| bad("rhythm", f[3]))?,
                qa: QaClass::parse(f[4]).ok_or_else(|| bad("qa", f[4]))?,
                episode_id: f[5].to_string(),
                noise_factor: f[6].parse().map_err(|_| bad("noise_factor", f[6]))?,
            })
        })
        .collect()
}

pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("windows.f32"), &f32_bytes(&bundle.windows))?;
    match &bundle.clean {
        Some(c) => write_atomic(&dir.join("clean.f32"), &f32_bytes(c))?,
        None => {
            let stale = dir.join("clean.f32");
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
    }
    write_atomic(&dir.join("labels.csv"), labels_csv(&bundle.labels)?.as_bytes())?;
    // The manifest goes last so a reader never sees it ahead of its blobs.
    write_atomic(&dir.join("manifest.json"), &manifest_bytes(&bundle.manifest)?)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let manifest: DatasetManifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"), "manifest.json")?)
        .map_err(|e| Error::load("manifest.json", e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::load(
            "version",
            format!("unsupported dataset version {} (reader supports {DATASET_VERSION})", manifest.version),
        ));
    }
    let blob = |name: &str, digest: &str| -> Result<Vec<f32>> {
        let bytes = read_file(&dir.join(name), name)?;
        let want = manifest.n_windows.checked_mul(manifest.window_len * 4);
        if want != Some(bytes.len()) {
            let want = want.map_or("an impossible size".to_string(), |w| format!("{w} bytes"));
            return Err(Error::load(name, format!("expected {want}, found {} bytes (truncated or padded)", bytes.len())));
        }
        if sha256_hex(&bytes) != digest {
            return Err(Error::load(name, "checksum mismatch: blob is corrupt"));
        }
        f32_values(&bytes, name)
    };
    let windows = blob("windows.f32", &manifest.windows_sha256)?;
    let clean = match (&manifest.has_clean, &manifest.clean_sha256) {
        (true, Some(d)) => Some(blob("clean.f32", d)?),
        (true, None) => return Err(Error::load("clean_sha256", "missing although has_clean is set")),
        (false, _) => None,
    };
    let label_bytes = read_file(&dir.join("labels.csv"), "labels.csv")?;
    if sha256_hex(&label_bytes) != manifest.labels_sha256 {
        return Err(Error::load("labels.csv", "checksum mismatch: table is corrupt or edited"));
    }
    let text = String::from_utf8(label_bytes).map_err(|_| Error::load("labels.csv", "not valid UTF-8"))?;
    let bundle = DatasetBundle {
        manifest,
        windows,
        clean,
        labels: parse_labels(&text)?,
    };
    bundle.validate()?;
    Ok(bundle)
}
