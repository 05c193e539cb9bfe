use std::path::Path;
use std::process::{Command, Output};

fn deepbeat(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepbeat"))
        .args(args)
        .env("DEEPBEAT_OUT", out_dir)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_and_load_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(deepbeat(&["train-deepbeat"], tmp.path()).status.code(), Some(2));
    assert_eq!(deepbeat(&["inspect", "--model", "resnet"], tmp.path()).status.code(), Some(2));
    let o = deepbeat(&["evaluate", "--data", "missing", "--model", "missing"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

#[test]
fn inspect_prints_the_paper_total() {
    let tmp = tempfile::tempdir().unwrap();
    let o = deepbeat(&["inspect", "--model", "cdae"], tmp.path());
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Total params: 40,645,748"));
}

#[test]
fn saliency_and_embedding_tables_from_a_tiny_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    std::fs::write(p("recipe.txt"), "seed = 3\ncounts = 16, 8, 8\n").unwrap();
    ok(&deepbeat(&["simulate", "--recipe", &p("recipe.txt")], tmp.path()));
    // With no --out the dataset lands in $DEEPBEAT_OUT/dataset.
    assert!(tmp.path().join("dataset/manifest.json").exists());
    let data = p("dataset");
    ok(&deepbeat(&["train-deepbeat", "--data", &data, "--no-pretrain", "--epochs", "1", "--out", &p("clf")], tmp.path()));

    ok(&deepbeat(
        &["saliency", "--data", &data, "--model", &p("clf"), "--layer", "shared", "--limit", "3", "--out", &p("cam.csv")],
        tmp.path(),
    ));
    let cam = std::fs::read_to_string(p("cam.csv")).unwrap();
    let lines: Vec<&str> = cam.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == lines[0].split(',').count()));
    assert!(tmp.path().join("cam.csv.run.json").exists());

    ok(&deepbeat(&["embeddings", "--data", &data, "--model", &p("clf"), "--out", &p("emb.csv")], tmp.path()));
    let emb = std::fs::read_to_string(p("emb.csv")).unwrap();
    assert!(emb.starts_with("window_id,label,e0,"));
    assert_eq!(emb.lines().count(), 9);
}
