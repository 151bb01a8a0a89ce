use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stcl::dataset::{ClipManifest, Dataset, Split};
use stcl::run::parse_log_line;

fn stcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stcl")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_dataset(dir: &Path, frames: &str, shift: &str) {
    let o = stcl(&[
        "gen-data", "--scenes", "3", "--frames", frames, "--canvas", "384", "--shift-px", shift, "--seed", "7", "--out", path(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&stcl(&[])), 2);
    let o = stcl(&["gen-data", "--scenes", "3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out"));
    assert_eq!(code(&stcl(&["train", "--manifest", "x", "--bogus"])), 2);
    assert_eq!(code(&stcl(&["train", "--manifest", "x", "--loss", "l3"])), 2);
    assert_eq!(code(&stcl(&["gen-data", "--out", "x", "--shift-px", "40:10"])), 2);
    assert_eq!(code(&stcl(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let o = stcl(&["train", "--manifest", "/nonexistent/dataset.kv", "--iters", "1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/dataset.kv"));
}

#[test]
fn gen_data_is_reproducible_and_respects_the_shift_range() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = stcl(&["gen-data", "--scenes", "3", "--frames", "20", "--canvas", "256", "--shift-px", "10:40", "--seed", "7", "--out", path(d)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 3 * 20 * 3);
    assert_eq!(ta, tb);

    let ds = Dataset::read(&a.join("dataset.kv")).unwrap();
    assert_eq!(ds.clips.len(), 3);
    for (_, p) in &ds.clips {
        let m = ClipManifest::read(p).unwrap();
        assert_eq!(m.len(), 20);
        assert!(m.lr.iter().chain(&m.hr).chain(&m.truth).all(|f| f.exists()));
        let hr = stcl::pnm::read_rgb(&m.hr[0]).unwrap();
        let (w, h) = hr.size();
        let d = m.homography.mean_corner_displacement(w as f64, h as f64);
        assert!((10.0 - 1e-9..=40.0 + 1e-9).contains(&d), "shift {}", d);
    }
}

#[test]
fn stcl_training_needs_three_frame_clips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "2", "4:6");
    let manifest = data.join("dataset.kv");
    let o = stcl(&["train", "--manifest", path(&manifest), "--loss", "stcl", "--iters", "1", "--lr-patch", "16", "--out", path(&tmp.path().join("r1"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("3 consecutive frames"));
    let o = stcl(&["train", "--manifest", path(&manifest), "--loss", "l2", "--iters", "2", "--lr-patch", "16", "--out", path(&tmp.path().join("r2"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_compare_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "3", "4:6");
    let manifest = data.join("dataset.kv");
    let mut checkpoints = Vec::new();
    for loss in ["l2", "stcl"] {
        let run = tmp.path().join(loss);
        let o = stcl(&[
            "train", "--manifest", path(&manifest), "--loss", loss, "--iters", "3", "--lr-patch", "16", "--val-every", "3", "--seed", "2", "--out", path(&run),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let log = std::fs::read_to_string(run.join("train.log")).unwrap();
        let lines: Vec<_> = log.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines.len(), 3);
        for (i, l) in lines.iter().enumerate() {
            let (iter, v) = parse_log_line(l).expect("log line parses");
            assert_eq!(iter, i as u64);
            assert!((v.total - (v.loss_a + v.loss_r + v.loss_t)).abs() < 1e-12);
        }
        let rec = std::fs::read_to_string(run.join("run.kv")).unwrap();
        assert!(rec.contains("seed") && rec.contains("version.stcl"));
        checkpoints.push(run.join("checkpoint.stck"));
    }

    let out = tmp.path().join("eval");
    let o = stcl(&["eval", "--checkpoint", path(&checkpoints[0]), "--test", path(&manifest), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(table.contains("bicubic"));

    let list = format!("{},{}", path(&checkpoints[0]), path(&checkpoints[1]));
    let cmp = |dir: &Path| {
        let o = stcl(&["compare", "--checkpoints", &list, "--test", path(&manifest), "--out", path(dir)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let t1 = cmp(&tmp.path().join("c1"));
    let t2 = cmp(&tmp.path().join("c2"));
    assert_eq!(t1, t2);
    let rows: Vec<_> = t1.lines().filter(|l| l.starts_with("bicubic") || l.starts_with("l2") || l.starts_with("stcl")).collect();
    assert!(rows.len() >= 3, "{}", t1);
    for col in ["PSNR", "SSIM", "FeatDist"] {
        assert!(t1.contains(col), "{}", t1);
    }
    assert_eq!(
        std::fs::read(tmp.path().join("c1/metrics.kv")).unwrap(),
        std::fs::read(tmp.path().join("c2/metrics.kv")).unwrap()
    );
    assert!(Dataset::read(&manifest).unwrap().split(Split::Test).count() >= 1);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "3", "4:6");
    let manifest = data.join("dataset.kv");
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    let base = ["train", "--manifest", path(&manifest), "--loss", "spatial", "--lr-patch", "16", "--seed", "3", "--val-every", "2"];
    let run = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        let o = stcl(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["--iters", "6", "--out", path(&full)]);
    run(&["--iters", "4", "--out", path(&split)]);
    let ck = split.join("checkpoint.stck");
    let ck_copy = tmp.path().join("mid.stck");
    std::fs::copy(&ck, &ck_copy).unwrap();
    run(&["--iters", "6", "--out", path(&split), "--resume", path(&ck_copy)]);
    assert_eq!(std::fs::read(full.join("checkpoint.stck")).unwrap(), std::fs::read(&ck).unwrap());
    assert_eq!(std::fs::read(full.join("train.log")).unwrap(), std::fs::read(split.join("train.log")).unwrap());
}

#[test]
fn checks_report_pass_and_injected_faults() {
    let o = stcl(&["loss-check", "--instances", "20"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 6, "{}", text);

    let o = stcl(&["grad-check", "--module", "diffcore"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.contains("conv2d") && text.contains("max_rel"), "{}", text);

    let o = stcl(&["grad-check", "--module", "diffcore", "--inject-fault", "conv2d"]);
    assert_eq!(code(&o), 1);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let failing: Vec<_> = text.lines().filter(|l| l.contains(" FAIL ")).collect();
    assert_eq!(failing.len(), 1, "{}", text);
    assert!(failing[0].starts_with("conv2d"), "{}", text);
}
