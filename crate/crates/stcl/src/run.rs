//! Training, evaluation and comparison runs with their on-disk records.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use stcl_core::features::Extractor;
use stcl_core::loss::LossValues;
use stcl_core::metrics::{peak_for, MetricReport};
use stcl_core::raw::{bicubic_upscale, BayerFrame};
use stcl_core::image::RgbImage;
use stcl_core::train::{EvalFrame, Evaluation, LossMode, TrainConfig, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::train_to_kv;
use crate::dataset::{par_map, Dataset, Split};
use crate::error::{Error, Result};
use crate::kv::{fmt_f64, KvMap};

pub const LOG_HEADER: &str = "# iter loss_a loss_r loss_t total";

pub fn format_log_line(iter: u64, v: &LossValues) -> String {
    format!(
        "{} {} {} {} {}",
        iter,
        fmt_f64(v.loss_a),
        fmt_f64(v.loss_r),
        fmt_f64(v.loss_t),
        fmt_f64(v.total)
    )
}

/// Inverse of [`format_log_line`]. Per-offset terms are not logged, so
/// `loss_c` comes back empty.
pub fn parse_log_line(line: &str) -> Option<(u64, LossValues)> {
    let mut it = line.split_whitespace();
    let iter = it.next()?.parse().ok()?;
    let mut f = || it.next()?.parse::<f64>().ok();
    let (loss_a, loss_r, loss_t, total) = (f()?, f()?, f()?, f()?);
    if it.next().is_some() {
        return None;
    }
    Some((
        iter,
        LossValues {
            loss_a,
            loss_r,
            loss_c: Default::default(),
            loss_t,
            total,
        },
    ))
}

/// Versions and provenance written into every run record.
pub fn stamp(kv: &mut KvMap, command: &str) {
    kv.set("command", command);
    kv.set("version.stcl", env!("CARGO_PKG_VERSION"));
    kv.set("version.format.stnt", crate::stnt::VERSION);
    kv.set("version.format.checkpoint", crate::checkpoint::VERSION);
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Frames per validation clip scored at each validation point
    /// (0 disables validation).
    pub val_frames: usize,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub start: u64,
    pub end: u64,
    pub losses: Vec<LossValues>,
}

fn append(path: &Path, text: &str, truncate: bool) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(!truncate)
        .write(true)
        .truncate(truncate)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains on the dataset's train split until `config.iterations` and writes
/// `train.log`, `val.log`, `checkpoint.stck`, `run.kv` and `manifest.kv`
/// under `opts.out`. With `resume`, the model, optimizer state and iteration
/// counter come from the checkpoint; only the target iteration count is
/// taken from `config`.
pub fn train_run(dataset: &Dataset, config: TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let (mut trainer, start) = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            let mut cfg = ck.config.clone();
            cfg.iterations = config.iterations;
            (Trainer::with_params(cfg, ck.params)?, ck.iteration)
        }
        None => (Trainer::new(config)?, 0),
    };
    let cfg = trainer.config().clone();
    let end = cfg.iterations;
    if start > end {
        return Err(Error::Config(format!("checkpoint is at iteration {}, beyond the target {}", start, end)));
    }
    let train = dataset.manifests(Split::Train)?;
    if train.is_empty() {
        return Err(Error::Config(String::from("dataset has no training clips")));
    }
    let need = 2 * cfg.radius() + 1;
    if cfg.loss_mode == LossMode::Stcl {
        if let Some(short) = train.iter().find(|m| m.len() < need) {
            return Err(Error::Config(format!(
                "stcl loss needs clips of at least {} consecutive frames; a clip has {}",
                need,
                short.len()
            )));
        }
    }
    let clips = crate::dataset::load_training_clips(&train, cfg.zoom)?;
    let mut val = Vec::new();
    if opts.val_frames > 0 {
        for (m, p) in dataset.manifests(Split::Val)?.iter().zip(dataset.split(Split::Val)) {
            let mut frames = m.eval_frames(&Dataset::label(p))?;
            frames.truncate(opts.val_frames);
            val.extend(frames);
        }
    }

    let log = opts.out.join("train.log");
    let val_log = opts.out.join("val.log");
    let fresh = start == 0;
    if fresh {
        append(&log, &format!("{}\n", LOG_HEADER), true)?;
        append(&val_log, "# iter psnr_db ssim\n", true)?;
    }
    let mut losses = Vec::with_capacity((end - start) as usize);
    let mut pending = String::new();
    for iter in start..end {
        let sample = trainer.sample(&clips, iter)?;
        let v = trainer.step(&sample, iter)?;
        writeln!(pending, "{}", format_log_line(iter, &v)).expect("string write");
        losses.push(v);
        let done = iter + 1;
        if done % cfg.val_every == 0 || done == end {
            append(&log, &pending, false)?;
            pending.clear();
            if !val.is_empty() {
                let ev = evaluate_frames("val", &val, None, |lr| trainer.predict(lr))?;
                append(
                    &val_log,
                    &format!("{} {} {}\n", done, fmt_f64(ev.vs_truth.mean_psnr()), fmt_f64(ev.vs_truth.mean_ssim())),
                    false,
                )?;
            }
        }
    }
    append(&log, &pending, false)?;

    let checkpoint = opts.out.join("checkpoint.stck");
    Checkpoint {
        config: cfg.clone(),
        iteration: end,
        params: trainer.params.clone(),
    }
    .write(&checkpoint)?;

    let mut rec = KvMap::new();
    stamp(&mut rec, "train");
    rec.set("dataset", dataset.path.to_string_lossy());
    rec.set("dataset.seed", dataset.settings.get("seed").unwrap_or("unknown"));
    rec.set("start_iteration", start);
    rec.set("end_iteration", end);
    if let Some(p) = &opts.resume {
        rec.set("resumed_from", p.to_string_lossy());
    }
    rec.set("val_frames", opts.val_frames);
    rec.merge(&train_to_kv(&cfg));
    rec.write(&opts.out.join("run.kv"))?;
    write_run_manifest(&opts.out, &["run.kv", "train.log", "val.log", "checkpoint.stck"])?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        start,
        end,
        losses,
    })
}

/// Lists a run directory's outputs.
pub fn write_run_manifest(dir: &Path, files: &[&str]) -> Result<()> {
    let mut kv = KvMap::new();
    kv.set("format", "stcl-run");
    for (i, f) in files.iter().enumerate() {
        kv.set(&format!("output.{}", i), f);
    }
    kv.write(&dir.join("manifest.kv"))
}

/// Scores `predict` on every frame, in parallel across frames.
pub fn evaluate_frames<F>(method: &str, frames: &[EvalFrame], extractor: Option<&Extractor>, predict: F) -> Result<Evaluation>
where
    F: Fn(&BayerFrame) -> stcl_core::Result<RgbImage> + Sync,
{
    let per_frame = par_map(frames.len(), |i| {
        stcl_core::train::evaluate(method, &frames[i..=i], extractor, &predict)
    });
    let peak = frames.first().map(|f| peak_for(f.truth.provenance())).unwrap_or(1.0);
    let mut out = Evaluation {
        method: method.to_string(),
        vs_truth: MetricReport::new(peak),
        vs_captured: MetricReport::new(peak),
    };
    for ev in per_frame {
        let ev = ev?;
        out.vs_truth.frames.extend(ev.vs_truth.frames);
        out.vs_captured.frames.extend(ev.vs_captured.frames);
    }
    Ok(out)
}

/// One scored method: per-scene evaluations plus the pooled one.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodScores {
    pub method: String,
    pub scenes: Vec<(String, Evaluation)>,
    pub all: Evaluation,
}

/// A method under comparison: bicubic or a trained checkpoint.
pub enum Method {
    Bicubic { zoom: usize },
    Model { label: String, trainer: Box<Trainer> },
}

impl Method {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let label = ck.config.loss_mode.as_str().to_string();
        Ok(Method::Model {
            label,
            trainer: Box::new(Trainer::with_params(ck.config, ck.params)?),
        })
    }

    pub fn label(&self) -> &str {
        match self {
            Method::Bicubic { .. } => "bicubic",
            Method::Model { label, .. } => label,
        }
    }

    fn predict(&self, lr: &BayerFrame) -> stcl_core::Result<RgbImage> {
        match self {
            Method::Bicubic { zoom } => bicubic_upscale(lr, *zoom),
            Method::Model { trainer, .. } => trainer.predict(lr),
        }
    }
}

/// Evaluates each method on every clip of `split` that carries ground truth.
pub fn score(dataset: &Dataset, split: Split, methods: &[Method], extractor: Option<&Extractor>) -> Result<Vec<MethodScores>> {
    let mut scenes = Vec::new();
    for p in dataset.split(split) {
        let m = crate::dataset::ClipManifest::read(p)?;
        let label = Dataset::label(p);
        let frames = m.eval_frames(&label)?;
        if !frames.is_empty() {
            scenes.push((label, frames));
        }
    }
    if scenes.is_empty() {
        return Err(Error::Config(format!("no {} clips with ground truth to evaluate", split.as_str())));
    }
    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let mut per_scene = Vec::with_capacity(scenes.len());
        for (label, frames) in &scenes {
            per_scene.push((label.clone(), evaluate_frames(method.label(), frames, extractor, |lr| method.predict(lr))?));
        }
        let mut all = Evaluation {
            method: method.label().to_string(),
            vs_truth: MetricReport::new(per_scene[0].1.vs_truth.peak),
            vs_captured: MetricReport::new(per_scene[0].1.vs_captured.peak),
        };
        for (_, ev) in &per_scene {
            all.vs_truth.frames.extend(ev.vs_truth.frames.iter().cloned());
            all.vs_captured.frames.extend(ev.vs_captured.frames.iter().cloned());
        }
        out.push(MethodScores {
            method: method.label().to_string(),
            scenes: per_scene,
            all,
        });
    }
    Ok(out)
}

fn feat(r: &MetricReport) -> String {
    r.mean_feat_dist().map(|v| format!("{:.4}", v)).unwrap_or_else(|| String::from("-"))
}

/// Aligned text table: pooled PSNR↑ SSIM↑ FeatDist↓ against both
/// references, then per-scene PSNR/SSIM against the true aligned HR.
pub fn format_table(rows: &[MethodScores]) -> String {
    let mut s = String::new();
    let scenes: Vec<&str> = rows.first().map(|r| r.scenes.iter().map(|(l, _)| l.as_str()).collect()).unwrap_or_default();
    let _ = write!(
        s,
        "{:<10} | {:>9} {:>7} {:>9} | {:>9} {:>7} {:>9}",
        "method", "PSNR↑", "SSIM↑", "FeatDist↓", "PSNR↑", "SSIM↑", "FeatDist↓"
    );
    for sc in &scenes {
        let _ = write!(s, " | {:>16}", sc);
    }
    s.push('\n');
    let _ = write!(s, "{:<10} | {:^27} | {:^27}", "", "vs true aligned HR", "vs captured HR");
    for _ in &scenes {
        let _ = write!(s, " | {:>16}", "PSNR / SSIM");
    }
    s.push('\n');
    for r in rows {
        let (t, c) = (&r.all.vs_truth, &r.all.vs_captured);
        let _ = write!(
            s,
            "{:<10} | {:>9.3} {:>7.4} {:>9} | {:>9.3} {:>7.4} {:>9}",
            r.method,
            t.mean_psnr(),
            t.mean_ssim(),
            feat(t),
            c.mean_psnr(),
            c.mean_ssim(),
            feat(c)
        );
        for (_, ev) in &r.scenes {
            let _ = write!(s, " | {:>7.3} / {:.4}", ev.vs_truth.mean_psnr(), ev.vs_truth.mean_ssim());
        }
        s.push('\n');
    }
    s
}

/// Machine-readable form: one `key=value` line per method, reference and
/// scene (`scene=all` for the pooled row).
pub fn format_kv_lines(rows: &[MethodScores]) -> String {
    let mut s = String::new();
    for r in rows {
        let scenes = std::iter::once(("all", &r.all)).chain(r.scenes.iter().map(|(l, e)| (l.as_str(), e)));
        for (scene, ev) in scenes {
            for (reference, rep) in [("truth", &ev.vs_truth), ("captured", &ev.vs_captured)] {
                let _ = write!(
                    s,
                    "method={} reference={} scene={} psnr_db={} ssim={} peak={}",
                    r.method,
                    reference,
                    scene,
                    fmt_f64(rep.mean_psnr()),
                    fmt_f64(rep.mean_ssim()),
                    fmt_f64(rep.peak)
                );
                if let Some(f) = rep.mean_feat_dist() {
                    let _ = write!(s, " feat_dist={}", fmt_f64(f));
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Scores bicubic plus each checkpoint on `split` and writes `table.txt`,
/// `metrics.kv` and `run.kv` under `out`.
pub fn compare_run(
    dataset: &Dataset,
    split: Split,
    checkpoints: &[PathBuf],
    feat: bool,
    out: &Path,
    command: &str,
) -> Result<Vec<MethodScores>> {
    let mut methods = Vec::with_capacity(checkpoints.len() + 1);
    let mut zoom = None;
    for p in checkpoints {
        let m = Method::from_checkpoint(p)?;
        if let Method::Model { trainer, .. } = &m {
            zoom.get_or_insert(trainer.config().zoom);
        }
        methods.push(m);
    }
    let zoom = zoom.unwrap_or(4);
    methods.insert(0, Method::Bicubic { zoom });
    let extractor = if feat {
        Some(Extractor::build(stcl_core::features::ExtractorSpec::default())?)
    } else {
        None
    };
    let rows = score(dataset, split, &methods, extractor.as_ref())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    crate::error::write_file(&out.join("table.txt"), format_table(&rows).as_bytes())?;
    crate::error::write_file(&out.join("metrics.kv"), format_kv_lines(&rows).as_bytes())?;
    let mut rec = KvMap::new();
    stamp(&mut rec, command);
    rec.set("dataset", dataset.path.to_string_lossy());
    rec.set("split", split.as_str());
    rec.set("feat_dist", feat);
    for (i, p) in checkpoints.iter().enumerate() {
        rec.set(&format!("checkpoint.{}", i), p.to_string_lossy());
    }
    rec.write(&out.join("run.kv"))?;
    write_run_manifest(out, &["run.kv", "table.txt", "metrics.kv"])?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_round_trip() {
        let v = LossValues {
            loss_a: 0.125,
            loss_r: 1.0 / 3.0,
            loss_c: Default::default(),
            loss_t: 2e-17,
            total: 0.4583333333333333,
        };
        let line = format_log_line(42, &v);
        assert_eq!(parse_log_line(&line), Some((42, v)));
        assert!(parse_log_line("1 2 3").is_none());
        assert!(parse_log_line("1 2 3 4 5 6").is_none());
    }
}
