use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[features]
n_mels = 16
segment_frames = 16

[model]
n_bands = 16
n_frames = 16
time_conv = { out_channels = 4, kernel = [5, 1], stride = [2, 1], padding = [2, 0] }
freq_conv = { out_channels = 4, kernel = [1, 5], stride = [1, 2], padding = [0, 2] }
fusion_conv = { out_channels = 4, kernel = [5, 5], stride = [2, 2], padding = [2, 2] }
time_encoder = { embed_dim = 4, n_heads = 2, ff_dim = 8 }
freq_encoder = { embed_dim = 4, n_heads = 2, ff_dim = 8 }
fusion_encoder = { embed_dim = 4, n_heads = 4, ff_dim = 8 }

[train]
batch_size = 8
lr = 0.003
"#;

fn tft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tft"))
        .args(args)
        .env_remove("TFT_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tft(args);
    assert!(
        out.status.success(),
        "tft {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tone corpus plus extracted tiny features; returns (config, features dir).
fn tiny_features(root: &Path, speakers: usize) -> (PathBuf, PathBuf) {
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let corpus = root.join("corpus");
    let feats = root.join("feats");
    ok(&["synth", "--out", p(&corpus), "--speakers", &speakers.to_string(), "--utterances", "1"]);
    ok(&[
        "extract",
        "--config",
        p(&cfg),
        "--manifest",
        p(&corpus.join("manifest.csv")),
        "--out",
        p(&feats),
    ]);
    (cfg, feats)
}

fn strip_wall(log: &str) -> Vec<String> {
    log.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned())
        .collect()
}

#[test]
fn extract_reports_segments_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let feats = dir.path().join("feats");
    ok(&["synth", "--out", p(&corpus), "--speakers", "2", "--utterances", "1"]);
    let manifest = corpus.join("manifest.csv");
    let first = ok(&["extract", "--manifest", p(&manifest), "--out", p(&feats)]);
    assert!(first.contains("8 extracted, 0 cached, 0 failed"), "{first}");
    // 1 s at 16 kHz: 99 frames, one segment of 80 per utterance
    let summary = std::fs::read_to_string(feats.join("summary.csv")).unwrap();
    assert!(summary.contains("angry,2,2\n"));
    assert!(summary.ends_with("total,8,8\n"));
    assert_eq!(std::fs::read_dir(&feats).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "tftf")
    }).count(), 8);
    let before = std::fs::read(feats.join("spk01_sad_00.tftf")).unwrap();

    let again = ok(&["extract", "--manifest", p(&manifest), "--out", p(&feats)]);
    assert!(again.contains("0 extracted, 8 cached"), "{again}");
    let forced = ok(&["extract", "--manifest", p(&manifest), "--out", p(&feats), "--force"]);
    assert!(forced.contains("8 extracted, 0 cached"), "{forced}");
    assert_eq!(std::fs::read(feats.join("spk01_sad_00.tftf")).unwrap(), before);
    assert!(feats.join("resolved_config.toml").exists());
}

#[test]
fn extract_fails_on_missing_audio_but_keeps_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth", "--out", p(&corpus), "--speakers", "1", "--utterances", "1"]);
    let manifest = corpus.join("manifest.csv");
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text += "wav/missing.wav,spk09,ses09,sad\n";
    std::fs::write(&manifest, text).unwrap();
    let feats = dir.path().join("feats");
    let out = tft(&["extract", "--manifest", p(&manifest), "--out", p(&feats)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.wav"));
    assert!(feats.join("spk01_angry_00.tftf").exists());
}

#[test]
fn training_is_reproducible_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, feats) = tiny_features(dir.path(), 2);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", p(&cfg), "--features", p(&feats), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let a = run("a", &["--epochs", "2", "--seed", "7"]);
    let b = run("b", &["--epochs", "2", "--seed", "7"]);
    let log_a = std::fs::read_to_string(a.join("training_log.csv")).unwrap();
    let log_b = std::fs::read_to_string(b.join("training_log.csv")).unwrap();
    assert_eq!(log_a.lines().count(), 1 + 2);
    assert_eq!(strip_wall(&log_a), strip_wall(&log_b));
    let ckpt = |d: &Path| std::fs::read(d.join("checkpoints/final.ckpt")).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));
    assert!(a.join("checkpoints/epoch_0002.ckpt").exists());

    // rerunning from the echoed config reproduces the run
    let resolved = a.join("resolved_config.toml");
    let c = dir.path().join("c");
    ok(&["train", "--config", p(&resolved), "--features", p(&feats), "--out", p(&c)]);
    assert_eq!(ckpt(&c), ckpt(&a));

    // resuming for two more epochs matches a four-epoch run
    let four = run("four", &["--epochs", "4", "--seed", "7"]);
    ok(&[
        "train",
        "--config",
        p(&resolved),
        "--features",
        p(&feats),
        "--out",
        p(&a),
        "--epochs",
        "4",
        "--resume",
        p(&a.join("checkpoints/final.ckpt")),
    ]);
    assert_eq!(ckpt(&a), ckpt(&four));
    let resumed_log = std::fs::read_to_string(a.join("training_log.csv")).unwrap();
    let four_log = std::fs::read_to_string(four.join("training_log.csv")).unwrap();
    assert_eq!(strip_wall(&resumed_log), strip_wall(&four_log));
}

#[test]
fn zero_learning_rate_keeps_train_war_flat() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, feats) = tiny_features(dir.path(), 1);
    let out = dir.path().join("lr0");
    ok(&[
        "train", "--config", p(&cfg), "--features", p(&feats), "--out", p(&out), "--lr", "0", "--epochs", "3",
        "--train.batch_size=64",
    ]);
    let log = std::fs::read_to_string(out.join("training_log.csv")).unwrap();
    let wars: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(wars.len(), 3);
    assert!(wars.iter().all(|&w| w == wars[0]), "{wars:?}");
}

#[test]
fn eval_reports_folds_and_pooled_block() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, feats) = tiny_features(dir.path(), 4);
    let out = dir.path().join("eval");
    let text = ok(&[
        "eval", "--config", p(&cfg), "--features", p(&feats), "--out", p(&out), "--epochs", "2", "--jobs", "2",
    ]);
    assert_eq!(text.matches("\nfold ").count(), 4);
    assert_eq!(text.matches("\npooled: 16 utterances").count(), 1);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(lines[5].starts_with("pooled,all,16,"));
    for unit in ["spk01", "spk02", "spk03", "spk04"] {
        assert!(out.join("folds").read_dir().unwrap().any(|e| {
            e.unwrap().file_name().to_string_lossy().contains(unit)
        }));
    }
}

#[test]
fn session_mode_uses_one_fold_per_session() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, feats) = tiny_features(dir.path(), 10);
    let out = dir.path().join("sessions");
    ok(&[
        "eval", "--config", p(&cfg), "--features", p(&feats), "--out", p(&out), "--epochs", "1", "--mode", "session",
    ]);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("fold_")).count(), 5);
}

#[test]
fn ablate_runs_all_or_selected_configs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, feats) = tiny_features(dir.path(), 2);
    let all = dir.path().join("all");
    ok(&["ablate", "--config", p(&cfg), "--features", p(&feats), "--out", p(&all), "--epochs", "1"]);
    let csv = std::fs::read_to_string(all.join("ablation.csv")).unwrap();
    let configs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(configs, ["T+F", "T+TF", "F+TF", "T+F+TF"]);
    assert!(csv.starts_with("config,time,freq,fusion,params,war,uar\n"));

    let one = dir.path().join("one");
    ok(&[
        "ablate", "--config", p(&cfg), "--features", p(&feats), "--out", p(&one), "--epochs", "1", "--only", "T+TF",
    ]);
    let csv = std::fs::read_to_string(one.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("T+TF,true,false,true,"));
}

fn matrix_shape(path: &Path) -> (usize, usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    (rows.len(), rows[0].split(',').count())
}

#[test]
fn dump_attention_writes_full_size_maps() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let feats = dir.path().join("feats");
    ok(&["synth", "--out", p(&corpus), "--speakers", "1", "--utterances", "1"]);
    ok(&["extract", "--manifest", p(&corpus.join("manifest.csv")), "--out", p(&feats)]);
    let run = dir.path().join("run");
    ok(&["train", "--features", p(&feats), "--out", p(&run), "--epochs", "1", "--train.batch_size=4"]);
    let ckpt = run.join("checkpoints/final.ckpt");
    let maps = dir.path().join("maps");
    let text = ok(&[
        "dump-attention", "--checkpoint", p(&ckpt), "--features", p(&feats), "--sample", "spk01_happy_00", "--out",
        p(&maps), "--per-head",
    ]);
    assert!(text.contains("true happy"), "{text}");
    let stem = "spk01_happy_00.seg0";
    assert_eq!(matrix_shape(&maps.join(format!("{stem}.logmel.csv"))), (80, 80));
    assert_eq!(matrix_shape(&maps.join(format!("{stem}.time.csv"))), (80, 80));
    assert_eq!(matrix_shape(&maps.join(format!("{stem}.freq.csv"))), (80, 80));
    assert_eq!(matrix_shape(&maps.join(format!("{stem}.fusion.csv"))), (20, 20));
    assert!(maps.join(format!("{stem}.fusion.head3.csv")).exists());
    assert!(maps.join(format!("{stem}.time.head1.csv")).exists());
    let meta = std::fs::read_to_string(maps.join(format!("{stem}.meta.json"))).unwrap();
    assert_eq!(meta.matches("\"file\"").count(), 1 + 3 + 2 + 2 + 4);

    let missing = tft(&[
        "dump-attention", "--checkpoint", p(&ckpt), "--features", p(&feats), "--sample", "nobody", "--out", p(&maps),
    ]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("unknown sample"));
}

#[test]
fn config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        vec!["synth", "--out", p(&out), "--train.epoch=3"],
        vec!["synth", "--out", p(&out), "--model.n_bands=78"],
        vec!["synth", "--out", p(&out), "--io.labels=[\"a\"]"],
        vec!["train", "--features", p(&out), "--out", p(&out)],
        vec!["synth", "--config", "/nonexistent.toml", "--out", p(&out)],
    ] {
        let o = tft(&args);
        assert!(!o.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error"));
    }
}

#[test]
fn config_path_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("env.toml");
    std::fs::write(&cfg, "[train]\nseed = 123\n").unwrap();
    let out = dir.path().join("o");
    let status = Command::new(env!("CARGO_BIN_EXE_tft"))
        .args(["synth", "--out", p(&out), "--speakers", "1", "--utterances", "1", "--seconds", "0.2"])
        .env("TFT_CONFIG", &cfg)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 123"));
}
