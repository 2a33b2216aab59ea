use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fastfusion::model::{small_config, Model, ModelConfig};
use fastfusion_cli::bench::BenchReport;
use fastfusion_cli::profile::{latency_1example, random_model, random_pair};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fastfusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny_squad.json")
}

fn train_checkpoint(dir: &Path, extra: &[&str]) -> PathBuf {
    let ckpt = dir.join("m.ckpt");
    let data = fixture();
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "2",
        "--hidden",
        "4",
        "--embed-dim",
        "8",
        "--batch-size",
        "3",
        "--out",
        ckpt.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn exit_codes() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--block", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["predict", "--checkpoint", "/no/such/file", "--context", "a", "--question", "b"]).status.code(), Some(1));
}

#[test]
fn bench_writes_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.json");
    let out = run(&["bench", "--block", "sru", "--seq-len", "64", "--hidden", "16", "--trials", "5", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let report: BenchReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!((report.seq_len, report.dim, report.trials), (64, 16, 5));
    assert_eq!(report.op_count.sequential_steps, 64);
    assert!(report.median_ns <= report.p90_ns);
}

#[test]
fn eval_writes_one_prediction_per_question() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_checkpoint(dir.path(), &[]);
    let preds = dir.path().join("preds.json");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", fixture().to_str().unwrap(), "--predictions-out", preds.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let map = fastfusion::data::read_predictions(&preds).unwrap();
    assert_eq!(map.keys().collect::<Vec<_>>(), ["q-loser", "q-venue", "q-winner"]);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["n"], 3);
}

#[test]
fn train_log_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.tsv");
    let ckpt = train_checkpoint(dir.path(), &["--log", log.to_str().unwrap()]);
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("kind\tepoch\tstep\tloss"));
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch\t")).count(), 2);

    let out = run(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--context", "Denver beat Carolina in the final.", "--question", "Who won?"]);
    assert!(out.status.success());
    let p: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = p["text"].as_str().unwrap();
    assert!("Denver beat Carolina in the final.".contains(text));
}

#[test]
fn synthetic_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let ckpt = dir.path().join(name);
        let out = run(&["train", "--synthetic", "20", "--epochs", "1", "--hidden", "4", "--embed-dim", "8", "--batch-size", "4", "--seed", "3", "--out", ckpt.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(out.stdout);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn profile_reports_every_component() {
    let out = run(&["profile", "--context-len", "40", "--question-len", "5", "--hidden", "8", "--trials", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(p["components"].as_array().unwrap().len(), 7);
    let out = run(&["profile", "--context-len", "40", "--hidden", "8", "--trials", "1", "--skip", "answer"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sru_reader_is_faster_than_lstm_reader() {
    let sru = random_model(ModelConfig { seed: 1, ..small_config(32, 50) }).unwrap();
    let lstm = random_model(ModelConfig {
        seed: 1,
        encoder: fastfusion::model::EncoderKind::Lstm,
        ..small_config(64, 50)
    })
    .unwrap();
    let (context, question) = random_pair(150, 8, 4);
    let ex = fastfusion::data::QaExample { id: "x".into(), context, question, answers: vec![] };
    let one = std::slice::from_ref(&ex);
    let a = latency_1example(&sru, one, 20).unwrap();
    let b = latency_1example(&lstm, one, 20).unwrap();
    assert!(a.median_ns < b.median_ns, "sru {} vs lstm {}", a.median_ns, b.median_ns);
}

#[test]
fn latency_command_rejects_small_n() {
    let dir = tempfile::tempdir().unwrap();
    let model: Model = random_model(small_config(4, 8)).unwrap();
    let ckpt = dir.path().join("r.ckpt");
    model.save(&ckpt).unwrap();
    let out = run(&["latency", "--checkpoint", ckpt.to_str().unwrap(), "--data", fixture().to_str().unwrap(), "--n", "5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["latency", "--checkpoint", ckpt.to_str().unwrap(), "--data", fixture().to_str().unwrap(), "--n", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn repeated_bench_runs_agree() {
    use fastfusion_cli::bench::{bench_block, Block};
    let a = bench_block(Block::Sru, 64, 64, 7, 2, 5).unwrap();
    let b = bench_block(Block::Sru, 64, 64, 7, 2, 5).unwrap();
    assert_eq!(a.checksum, b.checksum);
    let (lo, hi) = (a.median_ns.min(b.median_ns), a.median_ns.max(b.median_ns));
    assert!(hi < 3 * lo, "{lo} vs {hi}");
    let lstm = bench_block(Block::Lstm, 256, 128, 5, 1, 5).unwrap();
    let sru = bench_block(Block::Sru, 256, 128, 5, 1, 5).unwrap();
    assert!(sru.median_ns < lstm.median_ns);
}

#[test]
fn skipping_attention_reduces_time() {
    use fastfusion::model::Component;
    use fastfusion_cli::profile::profile_components;
    let model = random_model(ModelConfig { seed: 2, ..small_config(32, 50) }).unwrap();
    let (c, q) = random_pair(200, 10, 6);
    let full = profile_components(&model, &c, &q, 3, None).unwrap();
    let skipped = profile_components(&model, &c, &q, 3, Some(Component::QcAttention)).unwrap();
    assert!(skipped.profiled_total_ns < full.profiled_total_ns);
    assert!(skipped.get(Component::QcAttention).unwrap().mean_ns < full.get(Component::QcAttention).unwrap().mean_ns);
}

#[test]
fn repeated_predictions_are_identical() {
    let model = random_model(small_config(8, 16)).unwrap();
    let (c, q) = random_pair(60, 6, 9);
    let first = model.predict(&c, &q, None).unwrap();
    for _ in 0..5 {
        assert_eq!(model.predict(&c, &q, None).unwrap(), first);
    }
    let mut clock = fastfusion::model::StageClock::new();
    assert_eq!(model.predict_timed(&c, &q, None, Some(&mut clock)).unwrap(), first);
}
