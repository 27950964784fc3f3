use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use founddiff::checkpoint::{self, DENOISER_MAGIC, PERCEPTION_MAGIC};
use founddiff::ctsim::{read_dataset, read_manifest, DOSE_MENU};
use founddiff::dadiff::{Denoiser, InitMode};
use founddiff::numcore::Rng;
use founddiff::perception::PerceptionModel;
use founddiff_cli::commands::{CELL_METRICS, SPLIT_METRICS};
use founddiff_cli::RunConfig;

fn founddiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_founddiff")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = founddiff(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small 32×32 config rooted in `dir`; keys in `extra` replace the base ones.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let base = format!(
        "size = 32\nn_per_cell = 1\nencoder_widths = 8,8,16,16\nhead_hidden = 16\nd_e = 8\n\
         widths = 8,16\nlevels = 2\npatch = 16\niterations = 20\nperception_epochs = 1\n\
         dataset = {d}/train\ntest_dataset = {d}/test\ninput = {d}/test\n\
         perception_checkpoint = {d}/perception.dacp\ndenoiser_checkpoint = {d}/denoiser.dadf\n",
        d = dir.display()
    );
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    text.push_str(extra);
    let path = dir.join(format!("run{}.cfg", fs::read_dir(dir).unwrap().count()));
    fs::write(&path, text).unwrap();
    path
}

/// Writes an untrained perception checkpoint and a denoiser checkpoint for `cfg`.
fn write_checkpoints(cfg_path: &Path, denoiser_init: InitMode) {
    let cfg = RunConfig::parse(&fs::read_to_string(cfg_path).unwrap()).unwrap();
    let perception = PerceptionModel::new(cfg.perception_dims(), &mut Rng::new(1));
    checkpoint::save(&cfg.perception_checkpoint, PERCEPTION_MAGIC, &perception.params).unwrap();
    let net = Denoiser::new(cfg.denoiser_net(), denoiser_init, &mut Rng::new(2)).unwrap();
    checkpoint::save(&cfg.denoiser_checkpoint, DENOISER_MAGIC, &net.params).unwrap();
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn default_menus_give_every_fraction_and_family() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("sim");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    let entries = read_manifest(&out).unwrap();
    assert_eq!(entries.len(), DOSE_MENU.len() * 3);
    for f in DOSE_MENU {
        assert_eq!(entries.iter().filter(|e| e.1 == f).count(), 3);
    }
    assert_eq!(fs::read_to_string(out.join("config.txt")).unwrap(), fs::read_to_string(&cfg).unwrap());
}

#[test]
fn simulate_is_byte_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "fractions = 1/2, 1/20\n");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["simulate", "--config", p(&cfg), "--out", p(&a), "--seed", "5"]);
    ok(&["simulate", "--config", p(&cfg), "--out", p(&b), "--seed", "5"]);
    ok(&["simulate", "--config", p(&cfg), "--out", p(&c), "--seed", "6"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(read_dataset(&a).unwrap()[0].ldct, read_dataset(&c).unwrap()[0].ldct);
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    for (body, key) in [("fractions = 1/2, 0\n", "fractions"), ("sizee = 32\n", "sizee"), ("levels = 5\n", "levels")] {
        let cfg = small_config(tmp.path(), body);
        let out = founddiff(&["simulate", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
        assert_eq!(out.status.code(), Some(2), "{body}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(key), "{body}");
    }
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = founddiff(&["train-perception", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn denoiser_training_without_perception_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&tmp.path().join("train"))]);
    let out = founddiff(&["train-denoiser", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("perception_checkpoint"));
}

#[test]
fn smoke_pipeline_with_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // 8 samples: two families at the four seen fractions; 50 denoiser steps in two runs
    let menu = "families = chest, head\nfractions = 1/2, 1/4, 1/6, 1/10\n";
    let cfg = small_config(d, &format!("{menu}iterations = 30\n"));
    let start = Instant::now();
    ok(&["simulate", "--config", p(&cfg), "--out", p(&d.join("train"))]);
    assert_eq!(read_manifest(&d.join("train")).unwrap().len(), 8);
    ok(&["train-perception", "--config", p(&cfg), "--out", p(d)]);
    let trace = fs::read_to_string(d.join("perception_loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    ok(&["train-denoiser", "--config", p(&cfg), "--out", p(d)]);
    let first = fs::read_to_string(d.join("denoiser_loss.csv")).unwrap();
    assert_eq!(first.lines().count(), 31);

    let resumed = small_config(d, &format!("{menu}iterations = 50\nresume = true\n"));
    ok(&["train-denoiser", "--config", p(&resumed), "--out", p(d)]);
    let second = fs::read_to_string(d.join("denoiser_loss.csv")).unwrap();
    assert!(second.starts_with(&first), "resume must keep the earlier trace");
    let steps: Vec<usize> = second.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (0..50).collect::<Vec<_>>());
    assert!(start.elapsed().as_secs() < 120, "smoke run took {:?}", start.elapsed());
}

#[test]
fn denoise_counts_network_calls_and_writes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = small_config(d, "size = 64\nfamilies = head, chest\nfractions = 1/4, 1/10\n");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&d.join("test"))]);
    write_checkpoints(&cfg, InitMode::Default);
    let out = d.join("den");
    ok(&["denoise", "--config", p(&cfg), "--out", p(&out)]);
    let log = fs::read_to_string(out.join("denoise_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let name = row.split(',').next().unwrap();
        assert!(row.ends_with(",2"), "{row}");
        assert_eq!(fs::metadata(out.join(format!("{name}.raw"))).unwrap().len(), 64 * 64 * 4);
        assert!(fs::read(out.join(format!("{name}.pgm"))).unwrap().starts_with(b"P5\n64 64\n65535\n"));
    }

    // single file input, and a seed-fixed rerun gives the same bytes
    let one = read_manifest(&d.join("test")).unwrap()[0].0.clone();
    let (a, b) = (d.join("one_a"), d.join("one_b"));
    ok(&["denoise", "--config", p(&cfg), "--out", p(&a), "--input", p(&one)]);
    ok(&["denoise", "--config", p(&cfg), "--out", p(&b), "--input", p(&one)]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(fs::read_to_string(a.join("denoise_log.csv")).unwrap().lines().count(), 2);
}

#[test]
fn zero_net_with_eta_zero_returns_the_input_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = small_config(d, "eta = 0\nfamilies = abdomen\nfractions = 1/20\n");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&d.join("test"))]);
    write_checkpoints(&cfg, InitMode::Zero);
    let out = d.join("den");
    ok(&["denoise", "--config", p(&cfg), "--out", p(&out)]);
    let (path, _, _) = &read_manifest(&d.join("test")).unwrap()[0];
    let input = fs::read(path).unwrap();
    let n = 32 * 32 * 4;
    let ldct = &input[input.len() - n..];
    let stem = path.file_stem().unwrap().to_str().unwrap();
    assert_eq!(fs::read(out.join(format!("{stem}.raw"))).unwrap(), ldct);
}

#[test]
fn evaluate_reports_every_cell_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // the test set lacks 1/20 entirely and has no head samples
    let cfg = small_config(d, "families = abdomen, chest, head\n");
    let sim = small_config(d, "families = abdomen, chest\nfractions = 1/2, 1/3, 1/4, 1/5, 1/6, 1/8, 1/10\n");
    ok(&["simulate", "--config", p(&sim), "--out", p(&d.join("test")), "--seed", "3"]);
    write_checkpoints(&cfg, InitMode::Default);
    let (a, b) = (d.join("eval_a"), d.join("eval_b"));
    ok(&["evaluate", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["evaluate", "--config", p(&cfg), "--out", p(&b)]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let parsed = RunConfig::parse(&fs::read_to_string(&cfg).unwrap()).unwrap();
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = report.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let cells = (parsed.seen_fractions.len() + parsed.unseen_fractions.len()) * 3;
    assert_eq!(rows.len(), cells * CELL_METRICS.len() + 3 * SPLIT_METRICS.len());
    let seen: Vec<&str> = rows.iter().filter(|r| r[0] == "seen" && r[1] != "all").map(|r| r[1]).collect();
    let unseen: Vec<&str> = rows.iter().filter(|r| r[0] == "unseen" && r[1] != "all").map(|r| r[1]).collect();
    for f in ["1/2", "1/4", "1/6", "1/10"] {
        assert!(seen.contains(&f) && !unseen.contains(&f));
    }
    for f in ["1/3", "1/5", "1/8", "1/20"] {
        assert!(unseen.contains(&f) && !seen.contains(&f));
    }
    // empty cells are flagged, never zero
    for r in &rows {
        if r[1] == "1/20" || r[2] == "head" {
            assert_eq!((r[4], r[5]), ("0", "missing"), "{r:?}");
        } else {
            assert_ne!(r[5], "missing", "{r:?}");
        }
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["missing"].as_array().unwrap().len(), 8 + 2);
    assert!(json["cells"].as_array().unwrap().iter().any(|c| c["mean"].is_null()));
}

#[test]
fn verify_passes_clean_and_names_a_faulted_op() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "verify_quick = true\n");
    let clean = ok(&["verify", "--config", p(&cfg), "--out", p(&tmp.path().join("v"))]);
    let text = String::from_utf8_lossy(&clean.stdout);
    assert!(text.lines().count() > 25 && text.lines().all(|l| l.starts_with("PASS ") && l.contains("max_err=")));

    let out = founddiff(&["verify", "--config", p(&cfg), "--out", p(&tmp.path().join("f")), "--fault", "silu"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL op:silu ")));
    assert!(stdout.lines().any(|l| l.starts_with("PASS op:matmul ")));
    assert!(String::from_utf8_lossy(&out.stderr).contains("op:silu"));
}
