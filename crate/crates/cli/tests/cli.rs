use std::path::Path;
use std::process::{Command, Output};

use asmr_core::Checkpoint;

fn asmr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asmr"))
        .args(args)
        .env_remove("ASMR_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = asmr(args);
    assert!(
        out.status.success(),
        "asmr {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Data lines of a report, after checking the hash comment.
fn csv_lines(path: impl AsRef<Path>) -> Vec<String> {
    let text = read(path);
    let mut lines = text.lines();
    let first = lines.next().unwrap();
    assert!(first.starts_with("# config_hash="), "{first}");
    assert_eq!(first.len(), "# config_hash=".len() + 16);
    lines.map(str::to_string).collect()
}

fn value(lines: &[String], prefix: &str) -> f64 {
    let line = lines.iter().find(|l| l.starts_with(prefix)).unwrap();
    line.rsplit(',').next().unwrap().parse().unwrap()
}

const TOY: [&str; 10] = [
    "--set",
    "synth.group_sizes=[2,3,2]",
    "--set",
    "synth.n_categories=12",
    "--set",
    "synth.feature_dim=16",
    "--set",
    "model.hidden=[64,32]",
    "--set",
    "model.embed_dim=32",
];

fn toy(cmd: &str, out: &str, more: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out];
    args.extend_from_slice(&TOY);
    args.extend_from_slice(more);
    ok(&args)
}

#[test]
fn synth_writes_files_and_matching_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let stdout = String::from_utf8(ok(&["synth", "--out", out]).stdout).unwrap();
    assert!(stdout.contains("# Unseen"));
    for f in ["schema.json", "samples.jsonl", "splits.json"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f}");
    }
    let stats = csv_lines(tmp.path().join("synth_stats.csv"));
    assert_eq!(stats[0], "statistic,value");
    assert_eq!(value(&stats, "unseen_test_categories"), 18.0);
    assert_eq!(value(&stats, "train_categories"), 42.0);
    let images = value(&stats, "train_images") + value(&stats, "test_images");
    assert_eq!(images, 60.0 * 30.0);
    assert_eq!(read(tmp.path().join("data/samples.jsonl")).lines().count(), 1800);
}

#[test]
fn synth_all_unseen() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["synth", "--out", out, "--set", "synth.unseen_fraction=1.0"]);
    let stats = csv_lines(tmp.path().join("synth_stats.csv"));
    assert_eq!(value(&stats, "seen_test_categories"), 0.0);
    assert_eq!(value(&stats, "unseen_test_categories"), 60.0);
}

#[test]
fn output_dir_defaults_to_env_var() {
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_asmr"))
        .args(["synth"])
        .env("ASMR_OUT_DIR", tmp.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(tmp.path().join("synth_stats.csv").exists());
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"synth": {"n_categories": 20}, "seed": 7}"#).unwrap();
    let out = tmp.path().join("o");
    ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let stats = csv_lines(out.join("synth_stats.csv"));
    assert_eq!(value(&stats, "test_categories"), 20.0);

    // The CLI seed beats the file seed, so the hash line changes.
    let out2 = tmp.path().join("o2");
    ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap(), "--seed", "8"]);
    let h1 = read(out.join("synth_stats.csv")).lines().next().unwrap().to_string();
    let h2 = read(out2.join("synth_stats.csv")).lines().next().unwrap().to_string();
    assert_ne!(h1, h2);
}

#[test]
fn exit_codes_distinguish_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(asmr(&["synth", "--out", out, "--set", "loss.lamda=1"]).status.code(), Some(2));
    assert_eq!(asmr(&["synth", "--out", out, "--preset", "cuhk"]).status.code(), Some(2));
    assert_eq!(
        asmr(&["synth", "--out", out, "--set", "synth.group_sizes=[2,5,4]"]).status.code(),
        Some(2)
    );
    let missing = asmr(&["train", "--out", out]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("schema.json"));
    assert_eq!(
        asmr(&["gradcheck", "--out", out, "--set", "gradcheck.instances=2", "--inject-bug"])
            .status
            .code(),
        Some(4)
    );
}

#[test]
fn gradcheck_reports_blocks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let stdout = String::from_utf8(ok(&["gradcheck", "--out", out, "--set", "gradcheck.instances=3"]).stdout).unwrap();
    assert!(stdout.contains("PASS"));
    let lines = csv_lines(tmp.path().join("gradcheck.csv"));
    assert_eq!(lines[0], "block,max_rel_error,passed");
    let blocks: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    for b in ["image.fc1.weight", "category.fc3.bias", "w"] {
        assert!(blocks.contains(&b), "{b} missing from {blocks:?}");
    }
    assert!(lines[1..].iter().all(|l| l.ends_with(",1")));
}

#[test]
fn pretrain_feeds_train() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    toy("synth", out, &[]);
    toy("pretrain", out, &["--set", "train.batch_size=16"]);
    let log = csv_lines(tmp.path().join("pretrain_log.csv"));
    assert_eq!(log[0], "epoch,loss,accuracy");
    assert_eq!(log.len() - 1, 20);
    let accuracy: f64 = log.last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(accuracy > 0.95, "{accuracy}");

    let ckpt = Checkpoint::load(tmp.path().join("pretrain.ckpt.json")).unwrap();
    assert!(ckpt.model.pretrain_heads.is_none());
    assert!(ckpt.optimizer.is_none());
    let pre = tmp.path().join("pretrain.ckpt.json");
    toy("train", out, &["--checkpoint", pre.to_str().unwrap()]);
    let log = csv_lines(tmp.path().join("train_log.csv"));
    assert_eq!(log[0], "epoch,lr_image,lr_cat,loss_total,loss_ma,asmr_value");
    assert_eq!(log.len() - 1, 10);
    let total = |l: &str| -> f64 { l.split(',').nth(3).unwrap().parse().unwrap() };
    assert!(total(log.last().unwrap()) < total(&log[1]));
}

#[test]
fn zero_lambda_equals_disabled_regularizer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    toy("synth", data.to_str().unwrap(), &[]);
    let data_dir = data.join("data");
    let data_flag = format!("paths.data=\"{}\"", data_dir.display());
    let run = |name: &str, set: &str| {
        let out = tmp.path().join(name);
        toy(
            "train",
            out.to_str().unwrap(),
            &["--set", &data_flag, "--set", set, "--set", "train.epochs=3"],
        );
        read(out.join("model.ckpt.json"))
    };
    assert_eq!(run("a", "loss.lambda=0"), run("b", "loss.regularizer=false"));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("full");
    let o = out.to_str().unwrap();
    toy("synth", o, &[]);
    toy("train", o, &["--set", "train.epochs=6", "--set", "checkpoint_every=2"]);
    let mid = out.join("checkpoints/epoch_004.ckpt.json");
    assert!(mid.exists());

    let resumed = tmp.path().join("resumed");
    let data_flag = format!("paths.data=\"{}\"", out.join("data").display());
    toy(
        "train",
        resumed.to_str().unwrap(),
        &["--set", "train.epochs=6", "--set", &data_flag, "--checkpoint", mid.to_str().unwrap()],
    );
    assert_eq!(read(out.join("model.ckpt.json")), read(resumed.join("model.ckpt.json")));
    let full_log = csv_lines(out.join("train_log.csv"));
    let tail_log = csv_lines(resumed.join("train_log.csv"));
    assert_eq!(tail_log[1..], full_log[5..]);

    // A different seed cannot continue someone else's optimizer state.
    let wrong = asmr(&[
        "train",
        "--out",
        resumed.to_str().unwrap(),
        "--seed",
        "9",
        "--set",
        &data_flag,
        "--checkpoint",
        mid.to_str().unwrap(),
    ]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn eval_is_pure_and_above_floor() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    ok(&["synth", "--out", o]);
    ok(&["train", "--out", o]);
    ok(&["eval", "--out", o]);
    let first = read(tmp.path().join("eval_metrics.csv"));
    let pairs = read(tmp.path().join("eval_pairs.csv"));
    ok(&["eval", "--out", o]);
    assert_eq!(first, read(tmp.path().join("eval_metrics.csv")));
    assert_eq!(pairs, read(tmp.path().join("eval_pairs.csv")));

    let lines = csv_lines(tmp.path().join("eval_metrics.csv"));
    assert_eq!(lines[0], "metric,k,split,value");
    for split in ["seen", "unseen", "all"] {
        for k in [1, 5, 10] {
            let prefix = format!("rank,{k},{split},");
            assert_eq!(lines.iter().filter(|l| l.starts_with(&prefix)).count(), 1, "{prefix}");
        }
    }
    // Regression floor recorded from seed 1 without pretraining (1.0 observed).
    assert!(value(&lines, "rank,1,unseen,") >= 0.9);
    assert_eq!(csv_lines(tmp.path().join("eval_pairs.csv"))[0], "cat_i,cat_j,s,delta");
    assert_eq!(csv_lines(tmp.path().join("eval_pairs.csv")).len() - 1, 60 * 59 / 2);
}

#[test]
fn untrained_model_sits_in_the_null_band() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    ok(&["synth", "--out", o]);
    let rank1 = |seed: u64| -> f64 {
        let s = seed.to_string();
        ok(&["train", "--out", o, "--seed", &s, "--set", "train.epochs=0"]);
        ok(&["eval", "--out", o, "--seed", &s]);
        value(&csv_lines(tmp.path().join("eval_metrics.csv")), "rank,1,unseen,")
    };
    let null: Vec<f64> = (100..120).map(rank1).collect();
    let mean = null.iter().sum::<f64>() / 20.0;
    let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
    let chance = 1.0 / 18.0;
    assert!(
        (mean - chance).abs() <= 3.0 * sd / 20f64.sqrt() + 1e-12,
        "null mean {mean}, sd {sd}, chance {chance}"
    );
    let fresh = rank1(7);
    assert!((fresh - mean).abs() <= 3.0 * sd, "{fresh} outside {mean} ± 3·{sd}");
}

#[test]
fn retrieval_on_noiseless_data() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    let noiseless = ["--set", "synth.noise_std=0"];
    toy("synth", o, &noiseless);
    toy("train", o, &noiseless);
    let schema = asmr_core::AttributeSchema::load(tmp.path().join("data/schema.json")).unwrap();
    let dataset = asmr_core::data::load_dir(tmp.path().join("data")).unwrap();
    let target = dataset.samples.iter().find(|s| s.split != asmr_core::data::Split::Train).unwrap();
    let attrs = schema.decode(target.category.bits()).unwrap();
    let query: Vec<String> = attrs.iter().map(|(g, a)| format!("{g}:{a}")).collect();
    let query = query.join(",");
    let n_match = dataset
        .samples
        .iter()
        .filter(|s| s.split != asmr_core::data::Split::Train && s.category == target.category)
        .count();

    toy("retrieve", o, &["--query", &query, "--k", &n_match.to_string()]);
    let lines = csv_lines(tmp.path().join("retrieve.csv"));
    assert_eq!(lines[0], "rank,id,score,relevant");
    assert_eq!(lines.len() - 1, n_match);
    assert!(lines[1..].iter().all(|l| l.ends_with(",1")), "{lines:?}");

    let test_images = dataset
        .samples
        .iter()
        .filter(|s| s.split != asmr_core::data::Split::Train)
        .count();
    toy("retrieve", o, &["--query", "g0:g0_0", "--k", "100000"]);
    assert_eq!(csv_lines(tmp.path().join("retrieve.csv")).len() - 1, test_images);

    let mut args = vec!["retrieve", "--out", o, "--query", "colour:red"];
    args.extend_from_slice(&TOY);
    let bad = asmr(&args);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("'colour'"));
}

#[test]
fn ablate_emits_six_rows_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    toy(
        "ablate",
        o,
        &[
            "--set",
            "seeds=[1,2]",
            "--set",
            "train.epochs=2",
            "--set",
            "train.pretrain_epochs=2",
            "--jobs",
            "2",
        ],
    );
    let lines = csv_lines(tmp.path().join("ablate.csv"));
    assert_eq!(lines[0], "variant,seed,split,rank1,rank5,rank10,map,spearman_rho");
    assert_eq!(lines.len() - 1, 12);
    for seed in ["1", "2"] {
        let variants: Vec<&str> = lines[1..]
            .iter()
            .filter(|l| l.split(',').nth(1) == Some(seed))
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(
            variants,
            ["baseline", "baseline+pretrain", "full", "no_delta", "uniform_w", "l2norm_w"]
        );
    }
}
