use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn pyreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pyreid"))
        .args(args)
        .env("PYREID_DETERMINISTIC", "1")
        .output()
        .expect("spawn pyreid")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One shared small dataset for all tests.
fn dataset() -> &'static Path {
    static DIR: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("data");
        let o = pyreid(&["gen-data", "--out", s(&dir), "--seed", "3", "--ids", "16", "--images-per-id", "6"]);
        assert!(o.status.success(), "{}", stderr(&o));
        (tmp, dir)
    })
    .1
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--dataset", s(dataset()), "--out", s(out), "--set", "epochs=2"];
    args.extend_from_slice(extra);
    pyreid(&args)
}

#[test]
fn gen_data_writes_manifest_and_splits() {
    let dir = dataset();
    assert!(dir.join("manifest.csv").is_file());
    let manifest = fs::read_to_string(dir.join("manifest.csv")).unwrap();
    // 16 ids x 6 images plus the header
    assert_eq!(manifest.lines().count(), 97);
}

#[test]
fn repeated_training_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = train(out, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["trace.csv", "model.pyrt", "metrics.csv", "config.ini", "run_info.txt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("mAP,rank1,rank5,rank10\n"));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = train(&a, &["--seed", "11", "--pyramid-mask", "011111", "--set", "alpha=0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = a.join("config.ini");
    let o = pyreid(&["train", "--dataset", s(dataset()), "--out", s(&b), "--config", s(&config)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(fs::read(&config).unwrap(), fs::read(b.join("config.ini")).unwrap());
}

#[test]
fn resume_from_checkpoint_reproduces_the_model() {
    let tmp = TempDir::new().unwrap();
    let (full, resumed) = (tmp.path().join("full"), tmp.path().join("resumed"));
    let o = train(&full, &["--set", "epochs=3", "--set", "checkpoint_epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = full.join("checkpoints").join("epoch_001.pyrt");
    let o = train(&resumed, &["--set", "epochs=3", "--set", "checkpoint_epochs=1", "--resume", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(full.join("model.pyrt")).unwrap(), fs::read(resumed.join("model.pyrt")).unwrap());

    let full_trace = fs::read_to_string(full.join("trace.csv")).unwrap();
    let resumed_trace = fs::read_to_string(resumed.join("trace.csv")).unwrap();
    assert!(full_trace.ends_with(resumed_trace.split_once('\n').unwrap().1));
}

#[test]
fn missing_dataset_flag_exits_2() {
    let tmp = TempDir::new().unwrap();
    let o = pyreid(&["train", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--dataset"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = TempDir::new().unwrap();
    let o = train(tmp.path(), &["--set", "learning_speed=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_speed"), "{}", stderr(&o));
}

#[test]
fn bad_mask_exits_2() {
    let tmp = TempDir::new().unwrap();
    let o = train(tmp.path(), &["--pyramid-mask", "000000"]);
    assert_eq!(o.status.code(), Some(2));
    let o = train(tmp.path(), &["--pyramid-mask", "11x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    let o = pyreid(&["train", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).lines().count(), 1, "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let o = train(tmp.path(), &["--set", "base_lr=1e12"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn eval_scores_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let o = train(tmp.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = tmp.path().join("model.pyrt");
    let o = pyreid(&["eval", "--checkpoint", s(&model), "--dataset", s(dataset())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let trained = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert!(stdout.ends_with(&trained), "{stdout}");

    let o = pyreid(&["eval", "--checkpoint", s(&model), "--dataset", s(dataset()), "--pyramid-mask", "000001"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_rejects_a_missing_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let o = pyreid(&["eval", "--checkpoint", s(&tmp.path().join("nope.pyrt")), "--dataset", s(dataset())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn ablate_tabulates_every_run_and_the_means() {
    let tmp = TempDir::new().unwrap();
    let o = pyreid(&[
        "ablate",
        "--dataset",
        s(dataset()),
        "--out",
        s(tmp.path()),
        "--set",
        "epochs=1",
        "--masks",
        "111111,000001,100000",
        "--seeds",
        "1,2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(tmp.path().join("ablation.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["mask", "seed", "mAP", "rank1", "rank5", "rank10", "status"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3 * 2 + 3);
    assert_eq!(&rows[2][0], "000001");
    assert_eq!(rows.iter().filter(|r| &r[1] == "mean").count(), 3);
    assert!(rows.iter().all(|r| !r[2].is_empty()));
    assert!(tmp.path().join("runs/mask_100000_seed_2/trace.csv").is_file());
}

fn write_trace(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("trace.csv");
    fs::write(&path, format!("tau,phase,l_id,l_tp,k_id,k_tp,p_id,p_tp,fl_id,fl_tp,lr\n{body}")).unwrap();
    path
}

#[test]
fn export_curves_draws_one_timeline_block_per_row() {
    let tmp = TempDir::new().unwrap();
    let body: String = (1..=100)
        .map(|t| {
            let phase = if t % 7 < 3 { "id_only" } else { "combined" };
            let l_tp = if t % 10 == 0 { String::new() } else { format!("{}", 1.0 / t as f64) };
            format!("{t},{phase},{},{l_tp},1,1,0.9,0.99,0.001,0,0.01\n", 5.0 - t as f64 / 50.0)
        })
        .collect();
    let trace = write_trace(tmp.path(), &body);
    let out = tmp.path().join("curves");
    let o = pyreid(&["export-curves", "--trace", s(&trace), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for png in ["losses.png", "probability.png", "focal.png", "lr.png", "phase.png"] {
        assert!(out.join(png).is_file(), "{png}");
    }
    let phase = image::open(out.join("phase.png")).unwrap();
    assert_eq!(phase.width(), 100);

    let mut reader = csv::Reader::from_path(out.join("curves.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["tau", "quantity", "value"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 100 * 10);
    let gap = rows.iter().find(|r| &r[0] == "10" && &r[1] == "l_tp").unwrap();
    assert_eq!(&gap[2], "");
}

#[test]
fn export_curves_rejects_an_empty_trace() {
    let tmp = TempDir::new().unwrap();
    let trace = write_trace(tmp.path(), "");
    let o = pyreid(&["export-curves", "--trace", s(&trace), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_curves_names_the_malformed_row() {
    let tmp = TempDir::new().unwrap();
    let trace = write_trace(
        tmp.path(),
        "1,id_only,5,,1,1,1,1,0,0,0.01\n2,id_only,5,,1,1,1,1,0,0,0.01\n3,sideways,5,,1,1,1,1,0,0,0.01\n",
    );
    let o = pyreid(&["export-curves", "--trace", s(&trace), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
    // counted in file lines, header included
    assert!(stderr(&o).contains("row 4"), "{}", stderr(&o));
}
