//! Flag definitions and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use smokebench_core::par;

use crate::commands;
use crate::config::{
    override_opt, override_with, DesmokeSettings, EvalSettings, FileConfig, GlobalSettings,
    GradcheckSettings, Method, SynthSettings, TrainSettings,
};

#[derive(Debug, Parser)]
#[command(name = "smokebench", version, about = "Surgical smoke synthesis and desmoking benchmark")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run single-threaded so outputs are reproducible bit for bit.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads, 0 = automatic.
    #[arg(long, global = true, env = "SMOKEBENCH_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate smoky/clean pairs and a manifest from clean images.
    Synth(SynthArgs),
    /// Remove smoke with DCP, a trained model, or the ground-truth inversion.
    Desmoke(DesmokeArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Compare analytic and numerical gradients of the toy model.
    Gradcheck(GradcheckArgs),
    /// Train the toy model on a synthesis manifest.
    TrainToy(TrainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DesmokeArgs {
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Synthesis manifest (required for invert-oracle).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub patch_radius: Option<usize>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub t_floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strips: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    /// Also log errors at these steps (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Test hook: corrupt the analytic gradient; the check must fail.
    #[arg(long)]
    pub corrupt: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub flip: bool,
}

fn merge_synth(mut s: SynthSettings, a: SynthArgs) -> SynthSettings {
    override_opt(&mut s.clean_dir, a.clean_dir);
    override_opt(&mut s.out, a.out);
    override_with(&mut s.count, a.count);
    override_with(&mut s.height, a.height);
    override_with(&mut s.width, a.width);
    s
}

fn merge_desmoke(mut s: DesmokeSettings, a: DesmokeArgs) -> DesmokeSettings {
    override_with(&mut s.method, a.method);
    override_opt(&mut s.input, a.input);
    override_opt(&mut s.manifest, a.manifest);
    override_opt(&mut s.out, a.out);
    override_opt(&mut s.checkpoint, a.checkpoint);
    override_with(&mut s.dcp.patch_radius, a.patch_radius);
    override_with(&mut s.dcp.omega, a.omega);
    override_with(&mut s.dcp.t_floor, a.t_floor);
    s
}

fn merge_eval(mut s: EvalSettings, a: EvalArgs) -> EvalSettings {
    override_opt(&mut s.manifest, a.manifest);
    override_opt(&mut s.pred_dir, a.pred_dir);
    override_opt(&mut s.out, a.out);
    s.strips |= a.strips;
    s
}

fn merge_gradcheck(mut s: GradcheckSettings, a: GradcheckArgs) -> GradcheckSettings {
    override_with(&mut s.probes, a.probes);
    override_with(&mut s.step, a.step);
    override_with(&mut s.sweep, a.sweep);
    override_with(&mut s.tolerance, a.tolerance);
    override_opt(&mut s.out, a.out);
    s.corrupt |= a.corrupt;
    s
}

fn merge_train(mut s: TrainSettings, a: TrainArgs) -> TrainSettings {
    override_opt(&mut s.manifest, a.manifest);
    override_opt(&mut s.out, a.out);
    override_with(&mut s.steps, a.steps);
    override_with(&mut s.batch_size, a.batch_size);
    override_with(&mut s.lr_max, a.lr_max);
    override_with(&mut s.lr_min, a.lr_min);
    override_with(&mut s.weight_decay, a.weight_decay);
    override_with(&mut s.lambda, a.lambda);
    s.flip |= a.flip;
    s
}

/// Resolves configuration and runs the selected command.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let global = GlobalSettings {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        deterministic: cli.deterministic || file.deterministic.unwrap_or(false),
        threads: cli.threads.or(file.threads).unwrap_or(0),
    };
    let (deterministic, threads) = (global.deterministic, global.threads);
    let command = cli.command;
    let dispatch = move || -> anyhow::Result<()> {
        match command {
            Command::Synth(a) => commands::synth(&global, &merge_synth(file.synth, a)),
            Command::Desmoke(a) => commands::desmoke(&global, &merge_desmoke(file.desmoke, a)),
            Command::Eval(a) => commands::eval(&global, &merge_eval(file.eval, a)),
            Command::Gradcheck(a) => commands::gradcheck(&global, &merge_gradcheck(file.gradcheck, a)),
            Command::TrainToy(a) => commands::train_toy(&global, &merge_train(file.train_toy, a)),
        }
    };
    if deterministic {
        par::with_threads(1, dispatch)
    } else {
        par::init_global_threads(threads);
        dispatch()
    }
}
