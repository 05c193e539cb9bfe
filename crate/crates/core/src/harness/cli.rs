//! Command-line entry point.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::checkpoint::{load_checkpoint, load_cdae, save_cdae, save_deepbeat, save_forest, SavedModel};
use super::dataset::{load_dataset, save_dataset, DatasetBundle};
use super::pipeline::{eval_records, forest_predictions, simulate_bundle, spread, train_baseline, train_mode, TrainMode};
use super::{parse_recipe, write_atomic, RunRecord};
use crate::baseline::ForestConfig;
use crate::cdae::{build_cdae, cdae_specs, pretrain, CdaeConfig, Profile, ENCODER_DEPTH, INPUT_SHAPE};
use crate::deepbeat::{table_sections, Arch, Prediction, TrainConfig, COUNT_EXCEPTION, PUBLISHED_EXCEPTION_COUNT};
use crate::dsp::PreprocessConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, pr_curve, EvalConfig};
use crate::interpret::{export_embeddings, saliency, CamLayer};
use crate::neuro::{describe, keras_shape, AdamConfig, LayerRow, LayerSpec};
use crate::sim::{DatasetRecipe, Partition, RhythmClass};

/// Default directory for outputs whose path is not given.
pub const OUT_DIR_ENV: &str = "DEEPBEAT_OUT";

fn default_out(name: &str) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from).join(name)
}

#[derive(Parser, Debug)]
#[command(name = "deepbeat", version, about = "Simulated PPG, CDAE pretraining and multi-task AF detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a labeled dataset bundle from a recipe.
    Simulate(SimulateArgs),
    /// Pretrain the denoising autoencoder on (noisy, clean) pairs.
    PretrainCdae(PretrainArgs),
    /// Fine-tune the classifier.
    TrainDeepbeat(TrainArgs),
    /// Fit the random-forest baseline.
    TrainBaseline(BaselineArgs),
    /// Score a classifier or forest on a partition.
    Evaluate(EvaluateArgs),
    /// Class activation maps as a CSV table.
    Saliency(SaliencyArgs),
    /// Rhythm-branch embeddings as a CSV table.
    Embeddings(EmbeddingsArgs),
    /// Print a layer table with output shapes and parameter counts.
    Inspect(InspectArgs),
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    Profile::parse(s).ok_or_else(|| format!("unknown profile `{s}` (paper, mini)"))
}

fn parse_partition(s: &str) -> std::result::Result<Partition, String> {
    Partition::parse(s).ok_or_else(|| format!("unknown partition `{s}` (train, val, test)"))
}

fn parse_rhythm(s: &str) -> std::result::Result<RhythmClass, String> {
    RhythmClass::parse(s).ok_or_else(|| format!("unknown class `{s}` (af, sinus)"))
}

fn parse_layer(s: &str) -> std::result::Result<CamLayer, String> {
    CamLayer::parse(s).ok_or_else(|| format!("unknown layer `{s}` (rhythm, shared, encoder)"))
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// `key = value` recipe file; missing keys keep their defaults.
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// Overrides the recipe seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "mini", value_parser = parse_profile)]
    profile: Profile,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 25)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use at most this many evenly spaced training pairs.
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long, default_value_t = 256)]
    max_val_pairs: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// CDAE checkpoint whose encoder initializes the classifier.
    #[arg(long, conflicts_with = "no_pretrain")]
    encoder: Option<PathBuf>,
    /// Random encoder initialization.
    #[arg(long)]
    no_pretrain: bool,
    /// Train the rhythm head only.
    #[arg(long, conflicts_with = "lambda_qa")]
    single_task: bool,
    #[arg(long)]
    lambda_qa: Option<f64>,
    /// Ignored when an encoder is given (its profile is used).
    #[arg(long, default_value = "mini", value_parser = parse_profile)]
    profile: Profile,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 25)]
    patience: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
enum Gate {
    Excellent,
    None,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// DeepBeat or forest checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_partition)]
    partition: Partition,
    #[arg(long, value_enum, default_value = "excellent")]
    qa_gate: Gate,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Add episode sensitivity and the AF-free false-alarm rate.
    #[arg(long)]
    episodes: bool,
    /// Report path; the precision-recall curve goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SaliencyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_partition)]
    partition: Partition,
    #[arg(long, default_value = "af", value_parser = parse_rhythm)]
    class: RhythmClass,
    #[arg(long, default_value = "rhythm", value_parser = parse_layer)]
    layer: CamLayer,
    /// Maps for at most this many evenly spaced windows.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EmbeddingsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_partition)]
    partition: Partition,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum InspectModel {
    Cdae,
    Deepbeat,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long, value_enum)]
    model: InspectModel,
    #[arg(long, default_value = "paper", value_parser = parse_profile)]
    profile: Profile,
    /// Rows as JSON instead of a text table.
    #[arg(long)]
    json: bool,
}

/// Run the CLI on `argv` (program name first). Returns the exit code:
/// 0 on success, 2 on usage errors, 1 on any other error.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::PretrainCdae(a) => pretrain_cdae(a),
        Command::TrainDeepbeat(a) => train_deepbeat_cmd(a),
        Command::TrainBaseline(a) => train_baseline_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::Embeddings(a) => embeddings_cmd(a),
        Command::Inspect(a) => {
            print!("{}", inspect(a.model, a.profile, a.json)?);
            Ok(())
        }
    }
}

fn input(path: &Path, name: &str) -> Result<(String, String)> {
    let bytes = super::read_file(&path.join("manifest.json"), name)?;
    Ok((path.display().to_string(), super::sha256_hex(&bytes)))
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut recipe = match &a.recipe {
        Some(p) => parse_recipe(&std::fs::read_to_string(p)?, DatasetRecipe::default())?,
        None => DatasetRecipe::default(),
    };
    if let Some(s) = a.seed {
        recipe.seed = s;
    }
    let out = a.out.clone().unwrap_or_else(|| default_out("dataset"));
    let bundle = simulate_bundle(&recipe, &PreprocessConfig::default())?;
    save_dataset(&bundle, &out)?;
    RunRecord::new("simulate", recipe.seed, &recipe, Vec::new())?.write(&out.join("run.json"))?;
    eprintln!("wrote {} windows to {}", bundle.len(), out.display());
    Ok(())
}

fn pretrain_cdae(a: PretrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let train_rows = data.rows(Some(Partition::Train));
    let train_rows = match a.max_pairs {
        Some(n) => spread(&train_rows, n),
        None => train_rows,
    };
    let val_rows = spread(&data.rows(Some(Partition::Val)), a.max_val_pairs);
    let cfg = CdaeConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        patience: a.patience,
        seed: a.seed,
        ..CdaeConfig::default()
    };
    let mut model = build_cdae::<f32>(a.seed, a.profile)?;
    pretrain(&mut model, &data.pairs(&train_rows)?, &data.pairs(&val_rows)?, &cfg)?;
    if let Some(best) = model.history.iter().map(|e| e.val_mse).reduce(f64::min) {
        eprintln!("{} epochs, best validation MSE {best:.5}", model.history.len());
    }
    let out = a.out.clone().unwrap_or_else(|| default_out("cdae"));
    save_cdae(&model, serde_json::to_value(cfg)?, &out)?;
    RunRecord::new("pretrain-cdae", a.seed, &a, vec![input(&a.data, "dataset")?])?.write(&out.join("run.json"))
}

fn train_deepbeat_cmd(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let encoder = a.encoder.as_deref().map(load_cdae::<f32>).transpose()?;
    let profile = encoder.as_ref().map_or(a.profile, |e| e.profile);
    let mode = match (encoder.is_some(), a.single_task) {
        (true, false) => TrainMode::MultiPretrained,
        (false, false) => TrainMode::MultiRandom,
        (true, true) => TrainMode::SinglePretrained,
        (false, true) => TrainMode::SingleRandom,
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        lambda_qa: a.lambda_qa.unwrap_or(1.0),
        patience: a.patience,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let arch = Arch { dropout: a.dropout, ..Arch::default() };
    let train = data.windows_of(Some(Partition::Train));
    let val = data.windows_of(Some(Partition::Val));
    let model = train_mode(mode, encoder.as_ref(), profile, arch, &train, &val, &cfg)?;
    if let Some(last) = model.history.last() {
        eprintln!("{}: {} epochs, last validation rhythm accuracy {:.4}", mode.label(), model.history.len(), last.val_rhythm_accuracy);
    }
    let out = a.out.clone().unwrap_or_else(|| default_out("deepbeat"));
    let mut effective = cfg;
    if !mode.multi_task() {
        effective.lambda_qa = 0.0;
    }
    let training = serde_json::json!({ "mode": mode, "config": effective });
    save_deepbeat(&model, training, &out)?;
    let mut inputs = vec![input(&a.data, "dataset")?];
    if let Some(e) = &a.encoder {
        inputs.push(input(e, "encoder")?);
    }
    RunRecord::new("train-deepbeat", a.seed, &a, inputs)?.write(&out.join("run.json"))
}

fn train_baseline_cmd(a: BaselineArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let cfg = ForestConfig {
        n_estimators: a.trees,
        seed: a.seed,
    };
    let forest = train_baseline(&data.windows_of(Some(Partition::Train)), &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| default_out("forest"));
    save_forest(&forest, serde_json::to_value(cfg)?, &out)?;
    RunRecord::new("train-baseline", a.seed, &a, vec![input(&a.data, "dataset")?])?.write(&out.join("run.json"))
}

fn predictions(model: &SavedModel, data: &DatasetBundle, rows: &[usize]) -> Result<Vec<Prediction>> {
    let windows: Vec<_> = rows.iter().map(|&i| data.window(i)).collect();
    match model {
        SavedModel::DeepBeat(m) => m.infer_all(&windows, 64),
        SavedModel::Forest(f) => forest_predictions(f, &windows),
        SavedModel::Cdae(_) => Err(Error::Usage("a CDAE checkpoint cannot classify windows".into())),
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let (manifest, model) = load_checkpoint(&a.model)?;
    if a.qa_gate == Gate::Excellent && manifest.training.get("mode").and_then(|m| m.as_str()).is_some_and(|m| m.starts_with("single")) {
        eprintln!("warning: single-task model; its QA head was not trained, so QA gating is not meaningful");
    }
    let rows = data.rows(Some(a.partition));
    let records = eval_records(&data, &rows, &predictions(&model, &data, &rows)?)?;
    let cfg = EvalConfig {
        threshold: a.threshold,
        gate: (a.qa_gate == Gate::Excellent).then_some(crate::dsp::QaClass::Excellent),
        episodes: a.episodes,
    };
    let report = evaluate(&records, &cfg)?;
    let json = report.to_json()?;
    print!("{json}");
    let out = a.out.clone().unwrap_or_else(|| default_out("metrics.json"));
    write_atomic(&out, json.as_bytes())?;
    let (kept, _) = crate::eval::qa_gate(&records, cfg.gate);
    let scores: Vec<f64> = kept.iter().map(|r| r.prediction.p_af()).collect();
    let labels: Vec<bool> = kept.iter().map(|r| r.is_af()).collect();
    let mut curve = String::from("threshold,precision,recall\n");
    for p in pr_curve(&scores, &labels)? {
        let _ = writeln!(curve, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    write_atomic(&sidecar(&out, ".pr.csv"), curve.as_bytes())?;
    let inputs = vec![input(&a.data, "dataset")?, input(&a.model, "model")?];
    RunRecord::new("evaluate", manifest.seed, &a, inputs)?.write(&sidecar(&out, ".run.json"))
}

fn deepbeat_model(path: &Path) -> Result<crate::DeepBeat32> {
    match load_checkpoint(path)?.1 {
        SavedModel::DeepBeat(m) => Ok(m),
        _ => Err(Error::Usage(format!("{} is not a DeepBeat checkpoint", path.display()))),
    }
}

fn saliency_cmd(a: SaliencyArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let model = deepbeat_model(&a.model)?;
    let rows = data.rows(Some(a.partition));
    let rows = a.limit.map_or(rows.clone(), |n| spread(&rows, n));
    let mut csv = String::from("window_id,class");
    for i in 0..crate::dsp::WINDOW_LEN {
        let _ = write!(csv, ",s{i}");
    }
    csv.push('\n');
    for &i in &rows {
        let map = saliency(&model, &data.window(i), a.class, a.layer)?;
        let _ = write!(csv, "{},{}", map.window_id, map.class.as_str());
        for v in &map.scores {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let out = a.out.clone().unwrap_or_else(|| default_out("saliency.csv"));
    write_atomic(&out, csv.as_bytes())?;
    let inputs = vec![input(&a.data, "dataset")?, input(&a.model, "model")?];
    RunRecord::new("saliency", model.seed, &a, inputs)?.write(&sidecar(&out, ".run.json"))
}

fn embeddings_cmd(a: EmbeddingsArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let model = deepbeat_model(&a.model)?;
    let e = export_embeddings(&model, &data.windows_of(Some(a.partition)), 64)?;
    let width = e.rows.first().map_or(0, Vec::len);
    let mut csv = String::from("window_id,label");
    for i in 0..width {
        let _ = write!(csv, ",e{i}");
    }
    csv.push('\n');
    for ((id, label), row) in e.window_ids.iter().zip(&e.labels).zip(&e.rows) {
        let _ = write!(csv, "{id},{}", label.map_or("", |l| l.as_str()));
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let out = a.out.clone().unwrap_or_else(|| default_out("embeddings.csv"));
    write_atomic(&out, csv.as_bytes())?;
    let inputs = vec![input(&a.data, "dataset")?, input(&a.model, "model")?];
    RunRecord::new("embeddings", model.seed, &a, inputs)?.write(&sidecar(&out, ".run.json"))
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Serialize)]
struct Section {
    title: &'static str,
    rows: Vec<LayerRow>,
}

fn sections(model: InspectModel, profile: Profile) -> Result<Vec<Section>> {
    let input_row = LayerRow {
        name: "input".into(),
        kind: "InputLayer",
        output_shape: INPUT_SHAPE.to_vec(),
        params: 0,
    };
    let with_input = |mut rows: Vec<LayerRow>| {
        rows.insert(0, input_row.clone());
        rows
    };
    match model {
        InspectModel::Cdae => {
            let specs = cdae_specs(profile);
            let rows = describe(&INPUT_SHAPE, &specs)?;
            let (enc, dec) = rows.split_at(ENCODER_DEPTH);
            Ok(vec![
                Section {
                    title: "Encoder",
                    rows: with_input(enc.to_vec()),
                },
                Section {
                    title: "Decoder",
                    rows: dec.to_vec(),
                },
            ])
        }
        InspectModel::Deepbeat => table_sections(profile, Arch::default())?
            .into_iter()
            .enumerate()
            .map(|(i, (title, shape, specs)): (usize, (&'static str, Vec<usize>, Vec<(String, LayerSpec)>))| {
                let rows = describe(&shape, &specs)?;
                Ok(Section {
                    title,
                    rows: if i == 0 { with_input(rows) } else { rows },
                })
            })
            .collect(),
    }
}

/// Layer table of a model, as text or JSON.
pub fn inspect_table(model: &str, profile: Profile, json: bool) -> Result<String> {
    let m = match model {
        "cdae" => InspectModel::Cdae,
        "deepbeat" => InspectModel::Deepbeat,
        other => return Err(Error::Usage(format!("unknown model `{other}`"))),
    };
    inspect(m, profile, json)
}

fn inspect(model: InspectModel, profile: Profile, json: bool) -> Result<String> {
    let sections = sections(model, profile)?;
    if json {
        return Ok(serde_json::to_string_pretty(&sections)? + "\n");
    }
    let mut out = String::new();
    let _ = writeln!(out, "{:<20}  {:<18}  {:>12}  {}", "Layer Type", "Output Shape", "Param #", "Name");
    let mut total = 0;
    let mut flagged = false;
    for s in &sections {
        let _ = writeln!(out, "{}", s.title);
        for r in &s.rows {
            total += r.params;
            let note = if r.name == COUNT_EXCEPTION && profile == Profile::Paper {
                flagged = true;
                "  *"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "{:<20}  {:<18}  {:>12}  {}{note}",
                r.kind,
                keras_shape(&r.output_shape),
                thousands(r.params),
                r.name
            );
        }
    }
    let _ = writeln!(out, "Total params: {}", thousands(total));
    if flagged {
        let _ = writeln!(
            out,
            "* published count {PUBLISHED_EXCEPTION_COUNT} cannot be produced by any Conv1D with 35 input and 25 output channels; this layer uses kernel 2, stride 2"
        );
    }
    Ok(out)
}
