//! The `apm` command line.

mod error;
pub mod summary;
pub mod synth;

use std::path::{Path, PathBuf};

use apm_core::grad::check::{corrupt_gradient, gradient_check_with, GradCheckReport};
use apm_core::profiler::{sweep_csv, sweep_patches, ttt_run_cost};
use apm_core::teacher_io::{
    load_checkpoint, read_manifest, read_ppm, read_tensor, save_checkpoint, write_ppm, DistilledBundle,
};
use apm_core::trainer::{self, Granularity, TrainConfig, TrainSample, TrainState, Trainer};
use apm_core::ttt::{LossMode, TargetMode, TttConfig, TttSession};
use apm_core::{ModelSpec, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

pub use error::{CliError, CliResult};
use error::{at, flag};
pub use summary::RunSummary;
use summary::{create_dir, write_text};

#[derive(Debug, Parser)]
#[command(name = "apm", version, about = "Asynchronous perception machine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test-time training on one image against a distilled bundle.
    Ttt(TttArgs),
    /// Train from a manifest, checkpointing along the way.
    Train(TrainArgs),
    /// Fire every column of an image through the RGB head.
    Reconstruct(ReconstructArgs),
    /// Decode frames between the trigger columns of two images.
    Interpolate(InterpolateArgs),
    /// Analytical cost report and patch-count sweep.
    Profile(ProfileArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic teacher bundle.
    MakeBundle(MakeBundleArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Seed; the APM_SEED environment variable replaces the default.
    #[arg(long, env = "APM_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Columns fired concurrently. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    ColumnSum,
    Averaged,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetArg {
    Cls,
    Grid,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GranularityArg {
    PerImage,
    PerColumn,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TttArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value = "desk")]
    pub arch: String,
    /// Directory for summary.json and losses.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "column-sum")]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value = "cls")]
    pub target: TargetArg,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value = "desk-rgb")]
    pub arch: String,
    /// Checkpoint path, rewritten at every checkpoint.
    #[arg(long)]
    pub ckpt_out: PathBuf,
    /// Checkpoint every N optimiser steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub ckpt_every: u64,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_grid: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_rgb: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_cls: f64,
    #[arg(long, value_enum, default_value = "per-image")]
    pub granularity: GranularityArg,
    /// Stop once the per-pixel RGB loss of a sample falls below this.
    #[arg(long)]
    pub stop_below: Option<f64>,
    /// Directory for summary.json and losses.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "desk-rgb")]
    pub arch: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image_a: PathBuf,
    #[arg(long)]
    pub image_b: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub outdir: PathBuf,
    #[arg(long, default_value = "desk-rgb")]
    pub arch: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProfileArgs {
    #[arg(long, default_value = "desk")]
    pub arch: String,
    /// Query grid `HxW`; defaults to the architecture's.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub teacher_flops: u64,
    /// Largest patch count in the sweep; defaults to the grid size.
    #[arg(long)]
    pub sweep_max: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Sweep CSV path.
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "desk")]
    pub arch: String,
    #[arg(long, env = "APM_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = apm_core::grad::check::DEFAULT_EPS)]
    pub eps: f64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Test hook: perturb the analytic gradient before comparing.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MakeBundleArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub dc: usize,
    #[arg(long, env = "APM_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub target_class: usize,
    /// Standard deviation of the noise added to the CLS token.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub outdir: PathBuf,
}

/// What a command produced: its summary and whether its check passed.
pub struct Outcome {
    pub summary: RunSummary,
    pub passed: bool,
}

impl From<RunSummary> for Outcome {
    fn from(summary: RunSummary) -> Self {
        Self { summary, passed: true }
    }
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Ttt(a) => cmd_ttt(&a).map(Into::into),
        Command::Train(a) => cmd_train(&a).map(Into::into),
        Command::Reconstruct(a) => cmd_reconstruct(&a).map(Into::into),
        Command::Interpolate(a) => cmd_interpolate(&a).map(Into::into),
        Command::Profile(a) => cmd_profile(&a).map(Into::into),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::MakeBundle(a) => cmd_make_bundle(&a).map(Into::into),
    }
}

fn spec_for(name: &str) -> CliResult<ModelSpec> {
    ModelSpec::preset(name).ok_or_else(|| flag("arch", format!("unknown architecture `{name}` (desk, desk-rgb, full)")))
}

fn parse_grid(s: &str) -> CliResult<(usize, usize)> {
    let bad = || flag("grid", format!("expected HxW, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn load_image(path: &Path, spec: &ModelSpec) -> CliResult<Tensor> {
    let img = at(path, read_ppm(path))?;
    let want = spec.encoder.image_shape();
    if img.shape() != want {
        return Err(CliError::File {
            path: path.to_path_buf(),
            source: apm_core::Error::Config(format!(
                "image is {}x{}, the architecture expects {}x{}",
                img.shape()[2],
                img.shape()[1],
                want[2],
                want[1]
            )),
        });
    }
    Ok(img)
}

fn spec_json(spec: &ModelSpec) -> serde_json::Value {
    serde_json::to_value(spec).expect("spec serialises")
}

pub fn cmd_ttt(a: &TttArgs) -> CliResult<RunSummary> {
    let spec = spec_for(&a.arch)?;
    if a.iters == 0 {
        return Err(flag("iters", "must be at least 1"));
    }
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(flag("lr", format!("must be positive, got {}", a.lr)));
    }
    if a.run.workers == 0 {
        return Err(flag("workers", "must be at least 1"));
    }
    let image = load_image(&a.image, &spec)?;
    let bundle = DistilledBundle::load(&a.bundle)?;
    let cfg = TttConfig {
        iterations: a.iters,
        lr: a.lr,
        seed: a.run.seed,
        reinit_per_sample: true,
        workers: a.run.workers,
        target: match a.target {
            TargetArg::Cls => TargetMode::Cls,
            TargetArg::Grid => TargetMode::Grid,
        },
        loss: match a.loss {
            LossArg::ColumnSum => LossMode::ColumnSum,
            LossArg::Averaged => LossMode::Averaged,
        },
    };
    let report = TttSession::new(&spec, &cfg)?
        .run(&image, &bundle)
        .map_err(|e| match e {
            apm_core::Error::Config(_) | apm_core::Error::Dimension { .. } => CliError::File {
                path: a.bundle.clone(),
                source: e,
            },
            other => CliError::Core(other),
        })?;

    create_dir(&a.out)?;
    let csv_path = a.out.join("losses.csv");
    let mut csv = String::from("iteration,loss,objective\n");
    for (t, (l, o)) in report.losses.iter().zip(&report.objective).enumerate() {
        csv.push_str(&format!("{},{l:e},{o:e}\n", t + 1));
    }
    write_text(&csv_path, &csv)?;

    let summary_path = a.out.join("summary.json");
    let mut s = RunSummary::new("ttt", a);
    s.spec = spec_json(&spec);
    s.losses = report.losses.clone();
    s.prediction = report.prediction.clone();
    s.steps = a.iters as u64;
    s.outputs = vec![summary_path.clone(), csv_path];
    s.result = json!({ "ttt": cfg, "objective": report.objective, "f_avg": report.f_avg });
    s.write(&summary_path)?;
    match &report.prediction {
        Some(p) => eprintln!("predicted: {}", p.label),
        None => eprintln!("predicted: none (bundle has no class bank)"),
    }
    Ok(s)
}

fn load_samples(manifest: &Path) -> CliResult<Vec<TrainSample>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let image = at(&e.image, read_ppm(&e.image))?;
        let grid = e.grid.as_ref().map(|p| at(p, read_tensor(p))).transpose()?;
        let cls = match &e.cls {
            Some(p) => {
                let t = at(p, read_tensor(p))?;
                Some(Tensor::vector(t.into_data()))
            }
            None => None,
        };
        out.push(TrainSample { image, grid, cls });
    }
    Ok(out)
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.run.seed,
        w_grid: a.w_grid,
        w_rgb: a.w_rgb,
        w_cls: a.w_cls,
        granularity: match a.granularity {
            GranularityArg::PerImage => Granularity::PerImage,
            GranularityArg::PerColumn => Granularity::PerColumn,
        },
        workers: a.run.workers,
    }
}

fn save(path: &Path, state: &TrainState) -> CliResult<()> {
    at(path, save_checkpoint(path, &state.params, &state.adam, state.step))
}

/// Checkpoints hold `f32`, so the live state is rounded to match whenever one
/// is written; a resumed run then continues exactly like an uninterrupted one.
pub fn cmd_train(a: &TrainArgs) -> CliResult<RunSummary> {
    let spec = spec_for(&a.arch)?;
    let cfg = train_config(a);
    cfg.validate()?;
    if a.run.workers == 0 {
        return Err(flag("workers", "must be at least 1"));
    }
    let data = load_samples(&a.manifest)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let (params, adam, step) = at(p, load_checkpoint(p, &spec))?;
            at(p, Trainer::resume(&spec, &cfg, &data, TrainState { params, adam, step }))?
        }
        None => at(&a.manifest, Trainer::new(&spec, &cfg, &data))?,
    };
    let cells = {
        let (gh, gw) = spec.encoder.grid();
        (gh * gw) as f64
    };
    let mut history = Vec::new();
    let mut checkpoints = 0u64;
    while !trainer.finished() {
        let before = trainer.state().step;
        let loss = trainer.step_sample()?;
        history.push(loss);
        let after = trainer.state().step;
        if a.ckpt_every > 0 && before / a.ckpt_every != after / a.ckpt_every {
            trainer.state_mut().round_to_f32();
            save(&a.ckpt_out, trainer.state())?;
            checkpoints += 1;
        }
        if matches!(a.stop_below, Some(t) if loss.rgb / cells < t) {
            break;
        }
    }
    trainer.state_mut().round_to_f32();
    save(&a.ckpt_out, trainer.state())?;

    let mut s = RunSummary::new("train", a);
    s.spec = spec_json(&spec);
    s.losses = history.iter().map(|l| l.total).collect();
    s.steps = trainer.state().step;
    s.outputs = vec![a.ckpt_out.clone()];
    let last = history.last().copied().unwrap_or_default();
    s.result = json!({
        "train": cfg,
        "checkpoints": checkpoints + 1,
        "final": last,
        "final_rgb_per_pixel": last.rgb / cells,
    });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let csv_path = dir.join("losses.csv");
        let mut csv = String::from("step,grid,rgb,cls,total\n");
        for l in &history {
            csv.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", l.step, l.grid, l.rgb, l.cls, l.total));
        }
        write_text(&csv_path, &csv)?;
        let summary_path = dir.join("summary.json");
        s.outputs.push(summary_path.clone());
        s.outputs.push(csv_path);
        s.write(&summary_path)?;
    }
    eprintln!("trained {} steps; final loss {:e}", s.steps, last.total);
    Ok(s)
}

fn load_params(path: &Path, spec: &ModelSpec) -> CliResult<apm_core::ApmParams> {
    Ok(at(path, load_checkpoint(path, spec))?.0)
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> CliResult<RunSummary> {
    let spec = spec_for(&a.arch)?;
    let params = load_params(&a.ckpt, &spec)?;
    let image = load_image(&a.image, &spec)?;
    let out = trainer::reconstruct(&params, &spec, &image)?;
    at(&a.out, write_ppm(&a.out, &out))?;
    let target = trainer::pixel_targets(&image, &spec.encoder)?;
    let pred = trainer::planar_to_cells(&out)?;
    let mse = trainer::rgb_loss(&pred, &target)? / (pred.len() / 3) as f64;
    let mut s = RunSummary::new("reconstruct", a);
    s.spec = spec_json(&spec);
    s.outputs = vec![a.out.clone()];
    s.result = json!({ "mse_per_pixel": mse, "shape": out.shape() });
    eprintln!("per-pixel MSE {mse:e}");
    Ok(s)
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:03}.ppm")
}

pub fn cmd_interpolate(a: &InterpolateArgs) -> CliResult<RunSummary> {
    if a.steps == 0 {
        return Err(flag("steps", "must be at least 1"));
    }
    let spec = spec_for(&a.arch)?;
    let params = load_params(&a.ckpt, &spec)?;
    let ia = load_image(&a.image_a, &spec)?;
    let ib = load_image(&a.image_b, &spec)?;
    let frames = trainer::interpolate_images(&params, &spec, &ia, &ib, a.steps)?;
    create_dir(&a.outdir)?;
    let mut s = RunSummary::new("interpolate", a);
    s.spec = spec_json(&spec);
    for (k, f) in frames.iter().enumerate() {
        let path = a.outdir.join(frame_name(k));
        at(&path, write_ppm(&path, f))?;
        s.outputs.push(path);
    }
    s.result = json!({ "frames": frames.len() });
    Ok(s)
}

pub fn cmd_profile(a: &ProfileArgs) -> CliResult<RunSummary> {
    let mut spec = spec_for(&a.arch)?;
    if a.workers == 0 {
        return Err(flag("workers", "must be at least 1"));
    }
    if let Some(g) = &a.grid {
        spec.encoder.grid = Some(parse_grid(g)?);
    }
    let (h, w) = spec.encoder.grid();
    let max = a.sweep_max.unwrap_or(h * w);
    if max == 0 {
        return Err(flag("sweep-max", "must be at least 1"));
    }
    let report = ttt_run_cost(&spec, h, w, a.iters, a.teacher_flops, a.workers);
    let rows = sweep_patches(&spec, max, a.workers);
    write_text(&a.out, &sweep_csv(&rows))?;
    let mut s = RunSummary::new("profile", a);
    s.spec = spec_json(&spec);
    s.outputs = vec![a.out.clone()];
    s.result = json!({ "cost": report, "sweep_rows": rows.len() });
    eprintln!(
        "{} params; {} flops per column; {} flops per TTT run",
        report.params, report.flops_per_column, report.flops_ttt_run
    );
    Ok(s)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<Outcome> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(flag("eps", format!("must be positive, got {}", a.eps)));
    }
    if a.count == 0 {
        return Err(flag("count", "must be at least 1"));
    }
    let spec = spec_for(&a.arch)?;
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for seed in a.seed..a.seed + a.count {
        let r = gradient_check_with(&spec, seed, a.eps, |g| {
            if a.corrupt_gradient {
                corrupt_gradient(g)
            }
        })?;
        eprintln!(
            "seed {seed}: max relative error {:e} in {} ({})",
            r.max_relative_error,
            r.worst_tensor,
            if r.passed() { "pass" } else { "FAIL" }
        );
        reports.push(r);
    }
    let passed = reports.iter().all(GradCheckReport::passed);
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let mut s = RunSummary::new("gradcheck", a);
    s.spec = spec_json(&spec);
    s.result = json!({ "passed": passed, "max_relative_error": worst, "seeds": reports });
    Ok(Outcome { summary: s, passed })
}

pub fn cmd_make_bundle(a: &MakeBundleArgs) -> CliResult<RunSummary> {
    if a.classes == 0 {
        return Err(flag("classes", "must be at least 1"));
    }
    if a.dc == 0 {
        return Err(flag("dc", "must be at least 1"));
    }
    if a.target_class >= a.classes {
        return Err(flag("target-class", format!("{} is not below --classes {}", a.target_class, a.classes)));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(flag("noise", format!("must be non-negative, got {}", a.noise)));
    }
    let bundle = synth::make_bundle(a.classes, a.dc, a.target_class, a.noise, a.seed)?;
    bundle.write(&a.outdir)?;
    DistilledBundle::load(&a.outdir)?;
    let mut s = RunSummary::new("make-bundle", a);
    s.outputs = DistilledBundle::files(&a.outdir);
    s.result = json!({ "target_class": a.target_class, "label": format!("class_{}", a.target_class) });
    Ok(s)
}
