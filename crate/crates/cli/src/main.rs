use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use traj_diffuse::benchmark::{check_orderings, run_sweep, standard_configs, BenchmarkCase, NamedConfig};
use traj_diffuse::config::RunConfig;
use traj_diffuse::denoisers::checkpoint;
use traj_diffuse::denoisers::dataset::{BlobDataset, BlobSpec};
use traj_diffuse::denoisers::toy::{ToyConfig, ToyDenoiser, ToyLayer};
use traj_diffuse::denoisers::train::{train_new, TrainConfig};
use traj_diffuse::diagnostics::{run_variance_study, write_study, TraceConfig};
use traj_diffuse::eval::{score_video, DetectConfig};
use traj_diffuse::export::{export_video, load_video, manifest_path};
use traj_diffuse::masks::BoxTrajectory;
use traj_diffuse::sampler::{generate, Conditioning, GuidanceConfig, SamplingMode};
use traj_diffuse::schedule::ScheduleParams;
use traj_diffuse::{Error, Result};

#[derive(Parser)]
#[command(name = "traj-diffuse", version, about = "Trajectory-controlled sampling on a toy video diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one video from a trained toy model and export it.
    Generate(GenerateArgs),
    /// Write a synthetic blob dataset.
    GenData(GenDataArgs),
    /// Train the toy denoiser on freshly generated blob videos.
    Train(TrainArgs),
    /// Record per-step attention activation variance with and without masks.
    VarianceStudy(VarianceArgs),
    /// Score an exported video against its trajectory.
    Evaluate(EvaluateArgs),
    /// Run the ablation ladder over many seeds.
    Sweep(SweepArgs),
}

/// Sampler and schedule settings; each flag overrides the config file.
#[derive(Args, Clone, Default)]
struct SamplerArgs {
    /// JSON file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<SamplingMode>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    cg: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    frozen_steps: Option<usize>,
    /// Normalize guidance gradients to unit L2 norm (c_g defaults to 0.2).
    #[arg(long)]
    grad_norm: bool,
    /// Disable trajectory masks.
    #[arg(long)]
    no_masks: bool,
    /// Mask without normalization.
    #[arg(long)]
    no_mask_norm: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
}

impl SamplerArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            mode: self.mode,
            gamma: self.gamma,
            inner_steps: self.inner_steps,
            cg: self.cg,
            omega: self.omega,
            frozen_steps: self.frozen_steps,
            grad_norm: self.grad_norm.then_some(true),
            masks: self.no_masks.then_some(false),
            mask_norm: self.no_mask_norm.then_some(false),
            seed: self.seed,
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        };
        Ok(file.merge(flags))
    }
}

/// Model checkpoint plus the conditioning to sample with.
#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "model.bin")]
    checkpoint: PathBuf,
    /// Trajectory JSON; when absent one is drawn from `--case-seed`.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Blob identity named by the prompt.
    #[arg(long)]
    identity: Option<usize>,
    #[arg(long, default_value_t = 0)]
    case_seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "sample")]
    stem: String,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    videos: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 512)]
    videos: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long, default_value_t = 24)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long, default_value = "model.bin")]
    out: PathBuf,
}

#[derive(Args)]
struct VarianceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value = "spatial")]
    layer: ToyLayer,
    #[arg(long, default_value = "trace.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Manifest JSON written by `generate`.
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
    /// Fixed detection threshold instead of mean + k * std.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    k_std: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "model.bin")]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Extra TID runs at these guidance scales.
    #[arg(long = "cg-variant")]
    cg_variants: Vec<f64>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// Ordering checks and deviations as JSON.
    #[arg(long, default_value = "deviations.json")]
    report: PathBuf,
}

fn spec_for(cfg: &ToyConfig) -> BlobSpec {
    BlobSpec {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        identities: cfg.identities,
        prompt_len: cfg.prompt_len,
        ..BlobSpec::default()
    }
}

fn load_model(path: &Path, run: &RunConfig) -> Result<ToyDenoiser> {
    let model = checkpoint::load(path)?;
    if run.steps.is_some() || run.beta_start.is_some() || run.beta_end.is_some() {
        checkpoint::check_schedule(path, &run.schedule(model.schedule().params()))?;
    }
    Ok(model)
}

fn conditioning(args: &ModelArgs, spec: &BlobSpec) -> Result<Conditioning> {
    let case = BenchmarkCase::new(spec, args.case_seed)?;
    let trajectory = match &args.trajectory {
        Some(p) => BoxTrajectory::load(p)?,
        None => case.cond.trajectory,
    };
    let identity = args.identity.unwrap_or(case.identity);
    Ok(Conditioning {
        prompt: spec.prompt(Some(identity))?,
        trajectory: trajectory.at_resolution(spec.height, spec.width),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let run = a.sampler.run_config()?;
    let model = load_model(&a.model.checkpoint, &run)?;
    let spec = spec_for(&model.config);
    let cond = conditioning(&a.model, &spec)?;
    let guidance = run.guidance()?;
    let z = generate(&model, &cond, &guidance, model.schedule(), spec.latent_shape())?;
    export_video(&z, 0, &a.out, &a.stem)?;
    cond.trajectory.save(&a.out.join(format!("{}_trajectory.json", a.stem)))?;
    write_json(&a.out.join(format!("{}_config.json", a.stem)), &run.resolved(model.schedule().params())?)?;
    println!("{}", manifest_path(&a.out, &a.stem).display());
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let spec = BlobSpec::default();
    let data = BlobDataset::generate(spec, a.videos, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut index = Vec::with_capacity(data.len());
    for (i, v) in data.videos.iter().enumerate() {
        let stem = format!("video{i:04}");
        export_video(&v.latent, 0, &a.out, &stem)?;
        let traj = format!("{stem}_trajectory.json");
        v.trajectory.save(&a.out.join(&traj))?;
        index.push(serde_json::json!({ "video": format!("{stem}.json"), "trajectory": traj, "identity": v.identity }));
    }
    write_json(&a.out.join("index.json"), &serde_json::json!({ "spec": spec, "seed": a.seed, "videos": index }))?;
    log::info!("wrote {} videos to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let params = ScheduleParams {
        steps: a.steps.unwrap_or(ScheduleParams::toy().steps),
        beta_start: a.beta_start.unwrap_or(ScheduleParams::toy().beta_start),
        beta_end: a.beta_end.unwrap_or(ScheduleParams::toy().beta_end),
    };
    let schedule = params.build()?;
    let data = BlobDataset::generate(BlobSpec::default(), a.videos, a.data_seed)?;
    let train = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (model, report) = train_new(&data, &schedule, ToyConfig::default(), &train)?;
    checkpoint::save(&model, &a.out)?;
    write_json(&a.out.with_extension("losses.json"), &report)?;
    println!("final loss {:.5}", report.final_loss);
    Ok(())
}

fn cmd_variance(a: VarianceArgs) -> Result<()> {
    let run = a.sampler.run_config()?;
    let model = load_model(&a.model.checkpoint, &run)?;
    let cond = conditioning(&a.model, &spec_for(&model.config))?;
    let study = run_variance_study(&model, &cond, &run.guidance()?, a.layer)?;
    write_study(&study, &a.out)?;
    for c in TraceConfig::ALL {
        println!("{:14} mean squared error vs baseline {:.4e}", c.label(), study.mean_mse(c)?);
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let z = load_video(&a.video)?;
    let traj = BoxTrajectory::load(&a.trajectory)?;
    let detect = DetectConfig {
        k_std: a.k_std,
        fixed_level: a.threshold,
        ..DetectConfig::default()
    };
    let score = score_video(&z, &traj, &detect)?;
    let json = serde_json::json!({ "score": score, "detect": detect });
    match &a.out {
        Some(p) => write_json(p, &json)?,
        None => println!("{}", serde_json::to_string_pretty(&json)?),
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let spec = spec_for(&model.config);
    let mut configs = standard_configs();
    for cg in &a.cg_variants {
        configs.push(NamedConfig::new(&format!("masknorm_tid_cg{cg}"), GuidanceConfig { cg: *cg, ..GuidanceConfig::tid() }));
    }
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let results = run_sweep(&model, model.schedule(), &spec, &configs, &seeds, &DetectConfig::default())?;
    fs::write(&a.out, results.csv())?;
    let report = check_orderings(&results)?;
    write_json(&a.report, &serde_json::json!({ "summaries": summary_json(&results), "report": report }))?;
    for s in &results.summaries {
        println!("{:24} mIoU {:.3}  coverage {:.2}", s.config, s.miou(), s.coverage());
    }
    for d in &report.deviations {
        println!("deviation: {d}");
    }
    Ok(())
}

fn summary_json(results: &traj_diffuse::benchmark::SweepResults) -> serde_json::Value {
    results
        .summaries
        .iter()
        .map(|s| serde_json::json!({ "config": s.config, "settings": s.settings, "miou": s.report.miou, "coverage": s.report.coverage }))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::VarianceStudy(a) => cmd_variance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
