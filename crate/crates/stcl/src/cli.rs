//! The `stcl` command line. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use stcl_core::loss::StclConfig;
use stcl_core::train::{LossMode, TrainConfig};
use stcl_core::verify::{format_outcome, run_suite, Suite};

use crate::config::{stcl_from_kv, train_from_kv, STCL_KEYS};
use crate::dataset::{generate_dataset, parse_split, preprocess, Dataset, GenConfig, HrFormat, Split};
use crate::diag::{format_values, loss_check};
use crate::error::Result;
use crate::kv::{fmt_f64, KvMap};
use crate::run::{compare_run, format_table, stamp, train_run, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "stcl", version, about = "Raw-to-RGB zoom training with spatio-temporal coupling losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired LR-raw / HR-RGB dataset.
    GenData(GenArgs),
    /// Register every clip's HR frames onto its LR field of view.
    Preprocess(PreArgs),
    /// Train one loss arm.
    Train(TrainArgs),
    /// Evaluate one checkpoint (plus the bicubic baseline).
    Eval(EvalArgs),
    /// Check the composite-loss identities and kernel values.
    LossCheck(LossCheckArgs),
    /// Finite-difference gradient checks.
    GradCheck(GradArgs),
    /// Compare several checkpoints against bicubic.
    Compare(CompareArgs),
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| String::from("expected LO:HI"))?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad number `{}`", a))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad number `{}`", b))?;
    if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
        return Err(format!("need 0 ≤ LO ≤ HI, got {}:{}", lo, hi));
    }
    Ok((lo, hi))
}

fn parse_loss(s: &str) -> std::result::Result<LossMode, String> {
    LossMode::parse(s).ok_or_else(|| format!("unknown loss `{}` (l2, cx, spatial, stcl)", s))
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    Suite::parse(s).ok_or_else(|| format!("unknown module `{}` (diffcore, stcl, trainer)", s))
}

fn parse_split_name(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{}` (train, val, test)", s))
}

fn parse_hr_format(s: &str) -> std::result::Result<HrFormat, String> {
    HrFormat::parse(s).ok_or_else(|| format!("unknown HR format `{}` (ppm, png)", s))
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    zoom: Option<usize>,
    /// Misalignment range in HR pixels, LO:HI.
    #[arg(long, value_parser = parse_range)]
    shift_px: Option<(f64, f64)>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Square canvas side in HR pixels.
    #[arg(long)]
    canvas: Option<usize>,
    /// Noise σ (pixels) on the stored correspondences.
    #[arg(long)]
    corr_noise: Option<f64>,
    /// Train:val:test shares.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_parser = parse_hr_format)]
    hr_format: Option<HrFormat>,
    /// Key-value file with generator and `rig.*` settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    zoom: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossMode>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default `runs/<loss>-s<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Key-value training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint up to `--iters`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    lr_patch: Option<usize>,
    #[arg(long)]
    val_every: Option<u64>,
    /// Frames per validation clip scored at each validation point.
    #[arg(long, default_value_t = 4)]
    val_frames: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest holding the evaluation clips.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split_name)]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the feature-distance column.
    #[arg(long)]
    no_feat: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Comma-separated checkpoint files.
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split_name)]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_feat: bool,
}

#[derive(Args, Debug)]
struct LossCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    instances: usize,
    /// Key-value file with `stcl.*` settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, value_parser = parse_suite)]
    module: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: corrupts the analytic gradient of the named check.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Outcome of a command: success or a failed check (exit 1) with output
/// already printed.
enum Status {
    Ok,
    ChecksFailed,
}

fn gen_data(a: GenArgs) -> Result<Status> {
    let mut cfg = GenConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_kv(&KvMap::read(p)?, true)?;
    }
    if let Some(v) = a.scenes {
        cfg.scenes = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    if let Some(v) = a.zoom {
        cfg.rig.zoom_ratio = v;
    }
    if let Some(v) = a.shift_px {
        cfg.rig.shift_range = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.canvas {
        cfg.canvas = v;
    }
    if let Some(v) = a.corr_noise {
        cfg.corr_noise = v;
    }
    if let Some(v) = &a.split {
        cfg.split = parse_split(v)?;
    }
    if let Some(v) = a.hr_format {
        cfg.hr_format = v;
    }
    let ds = generate_dataset(&cfg, &a.out)?;
    let mut rec = KvMap::new();
    stamp(&mut rec, "gen-data");
    cfg.to_kv(&mut rec);
    rec.write(&a.out.join("run.kv"))?;
    println!("wrote {} clips to {}", ds.clips.len(), ds.path.display());
    Ok(Status::Ok)
}

fn preprocess_cmd(a: PreArgs) -> Result<Status> {
    let ds = Dataset::read(&a.manifest)?;
    let out = preprocess(&ds, &a.out, a.zoom)?;
    let mut rec = KvMap::new();
    stamp(&mut rec, "preprocess");
    rec.set("source", a.manifest.to_string_lossy());
    rec.set("zoom", a.zoom);
    rec.write(&a.out.join("run.kv"))?;
    println!("registered {} clips into {}", out.clips.len(), out.path.display());
    Ok(Status::Ok)
}

fn train_cmd(a: TrainArgs) -> Result<Status> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        train_from_kv(&KvMap::read(p)?, &mut cfg)?;
    }
    if let Some(v) = a.loss {
        cfg.loss_mode = v;
    }
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr_patch {
        cfg.lr_patch = v;
    }
    if let Some(v) = a.val_every {
        cfg.val_every = v;
    }
    cfg.validate()?;
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-s{}", cfg.loss_mode.as_str(), cfg.seed)));
    let ds = Dataset::read(&a.manifest)?;
    let outcome = train_run(
        &ds,
        cfg,
        &TrainOptions {
            out,
            val_frames: a.val_frames,
            resume: a.resume,
        },
    )?;
    if let Some(last) = outcome.losses.last() {
        println!("iteration {} {}", outcome.end, format_values(last));
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(Status::Ok)
}

fn default_eval_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join("eval")
}

fn eval_cmd(a: EvalArgs) -> Result<Status> {
    let ds = Dataset::read(&a.test)?;
    let out = a.out.unwrap_or_else(|| default_eval_dir(&a.checkpoint));
    let rows = compare_run(&ds, a.split, &[a.checkpoint], !a.no_feat, &out, "eval")?;
    print!("{}", format_table(&rows));
    Ok(Status::Ok)
}

fn compare_cmd(a: CompareArgs) -> Result<Status> {
    let ds = Dataset::read(&a.test)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("runs").join("compare"));
    let rows = compare_run(&ds, a.split, &a.checkpoints, !a.no_feat, &out, "compare")?;
    print!("{}", format_table(&rows));
    Ok(Status::Ok)
}

fn loss_check_cmd(a: LossCheckArgs) -> Result<Status> {
    let mut cfg = StclConfig::default();
    if let Some(p) = &a.config {
        let kv = KvMap::read(p)?;
        kv.reject_unknown(STCL_KEYS)?;
        stcl_from_kv(&kv, &mut cfg)?;
    }
    let tol = 1e-12;
    let rep = loss_check(a.seed, a.instances, &cfg)?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} composition instances={} max_err={:e}",
        verdict(rep.composition_err <= tol),
        rep.instances,
        rep.composition_err
    );
    println!("{} temporal_sum max_err={:e}", verdict(rep.temporal_err <= tol), rep.temporal_err);
    println!("{} self_match max_total={:e}", verdict(rep.self_match_max == 0.0), rep.self_match_max);
    for (d, k, e) in &rep.kernel {
        println!("{} kernel d={} kappa={} expected={}", verdict((k - e).abs() <= tol), d, fmt_f64(*k), fmt_f64(*e));
    }
    if let Some(v) = &rep.example {
        println!("example {}", format_values(v));
    }
    Ok(if rep.passed(tol) { Status::Ok } else { Status::ChecksFailed })
}

fn grad_check_cmd(a: GradArgs) -> Result<Status> {
    let outcomes = run_suite(a.module, a.seed, a.inject_fault.as_deref())?;
    let mut ok = true;
    for o in &outcomes {
        ok &= o.passed();
        println!("{}", format_outcome(o));
    }
    println!("{} {} checks in {}", if ok { "PASS" } else { "FAIL" }, outcomes.len(), a.module.as_str());
    Ok(if ok { Status::Ok } else { Status::ChecksFailed })
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Preprocess(a) => preprocess_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::LossCheck(a) => loss_check_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    };
    match result {
        Ok(Status::Ok) => 0,
        Ok(Status::ChecksFailed) => 1,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}
