//! Command-line surface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crossmodal_core::trainer::Regime;

use crate::checkpoint::load_checkpoint;
use crate::config::{parse_override, RunConfig, CONFIG_ECHO};
use crate::error::{Error, Result};
use crate::gendata::{discover_meshes, generate, toy_dataset, toy_sources, write_toy_meshes};
use crate::manifest::load_dataset;
use crate::report::Report;
use crate::run::{eval_pairs, eval_probe, eval_retrieve, eval_segment, run_pretrain};

#[derive(Debug, Parser)]
#[command(name = "crossmodal", version, about = "Self-supervised joint image and point-cloud feature learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every command accepts.
#[derive(Debug, Args)]
pub struct Common {
    /// Plain-text `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// `toy` or `full`.
    #[arg(long)]
    pub profile: Option<String>,
    /// Root seed; falls back to CROSSMODAL_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render views and sample clouds for every mesh.
    GenData(GenDataArgs),
    /// Run joint self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[command(subcommand)]
        protocol: EvalCommand,
    },
    /// Write procedural toy meshes with per-face part labels as OFF files.
    Toydata(ToydataArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of `<class>/[train|test/]*.off` meshes.
    #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
    pub input: Option<PathBuf>,
    /// Generate procedural toy shapes instead of reading meshes.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    /// Worker threads, 0 = all cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also write every cloud as CSV.
    #[arg(long)]
    pub cloud_csv: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from a checkpoint, appending to the trace.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained checkpoint. Without `--config`, a `config.txt` next to it
    /// (or one level up) supplies the configuration.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Linear probes on frozen 2D and 3D features.
    Probe {
        #[command(flatten)]
        args: EvalArgs,
        /// Views max-pooled per object for the 2D feature.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Shape retrieval by 3D features.
    Retrieve {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Cross-modality accuracy and pair distance statistics.
    Pairs {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Part segmentation transfer.
    Segment {
        #[command(flatten)]
        args: EvalArgs,
        /// frozen, unfrozen, scratch or random-frozen.
        #[arg(long)]
        regime: Option<String>,
        /// Fraction of training shapes.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ToydataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

fn resolve(common: &Common, file: Option<&Path>, extra: Vec<(&str, Option<String>)>) -> Result<RunConfig> {
    let mut overrides = common.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let flags = [("profile", common.profile.clone()), ("seed", common.seed.map(|s| s.to_string()))];
    for (k, v) in flags.into_iter().chain(extra) {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    RunConfig::load(file.or(common.config.as_deref()), &overrides)
}

/// The configuration echoed next to a checkpoint, if any.
fn checkpoint_config(checkpoint: Option<&Path>) -> Option<PathBuf> {
    checkpoint?.ancestors().skip(1).take(2).map(|d| d.join(CONFIG_ECHO)).find(|p| p.is_file())
}

fn finish_report(report: &Report, out: &Path, stem: &str, config: &RunConfig) -> Result<String> {
    config.echo(out)?;
    report.write(out, stem)?;
    Ok(report.to_json())
}

/// Runs one command and returns the text to print on success.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData(a) => {
            let config = resolve(
                &a.common,
                None,
                vec![
                    ("classes", a.classes.clone()),
                    ("per_class", a.per_class.map(|v| v.to_string())),
                    ("views", a.views.map(|v| v.to_string())),
                    ("workers", a.workers.map(|v| v.to_string())),
                ],
            )?;
            let sources = match &a.input {
                Some(dir) => discover_meshes(dir)?,
                None => toy_sources(&toy_dataset(&config)?),
            };
            let s = generate(&a.out, &sources, &config, a.cloud_csv)?;
            Ok(format!(
                "objects: {} generated, {} already complete, {} skipped as unreadable; {} images, {} clouds",
                s.generated, s.already_complete, s.failed, s.images, s.clouds
            ))
        }
        Command::Toydata(a) => {
            let config = resolve(
                &a.common,
                None,
                vec![("classes", a.classes.clone()), ("per_class", a.per_class.map(|v| v.to_string()))],
            )?;
            let n = write_toy_meshes(&a.out, &toy_dataset(&config)?)?;
            config.echo(&a.out)?;
            Ok(format!("wrote {n} meshes to {}", a.out.display()))
        }
        Command::Pretrain(a) => {
            let config = resolve(
                &a.common,
                None,
                vec![
                    ("iters", a.iters.map(|v| v.to_string())),
                    ("beta", a.beta.map(|v| v.to_string())),
                    ("deterministic", a.deterministic.then(|| "true".to_string())),
                ],
            )?;
            let data = load_dataset(&a.data)?;
            let o = run_pretrain(&data.store, &a.out, &config, a.resume.as_deref())?;
            let last = o.trace.last().map(|r| format!(", final l_self {}", r.l_self)).unwrap_or_default();
            Ok(format!("{} iterations{last}; checkpoint {}", o.trace.len(), o.final_checkpoint.display()))
        }
        Command::Eval { protocol } => eval(protocol),
    }
}

fn eval(protocol: EvalCommand) -> Result<String> {
    let (args, extra) = match &protocol {
        EvalCommand::Probe { args, views } => (args, vec![("eval_views", views.map(|v| v.to_string()))]),
        EvalCommand::Retrieve { args } | EvalCommand::Pairs { args } => (args, vec![]),
        EvalCommand::Segment { args, regime, fraction, epochs } => (
            args,
            vec![
                ("regime", regime.clone()),
                ("fraction", fraction.map(|v| v.to_string())),
                ("seg_epochs", epochs.map(|v| v.to_string())),
            ],
        ),
    };
    let file = args.common.config.clone().or_else(|| checkpoint_config(args.checkpoint.as_deref()));
    let config = resolve(&args.common, file.as_deref(), extra)?;
    let encoders = config.encoder_config()?;
    let params = args.checkpoint.as_deref().map(|p| load_checkpoint(p, &encoders)).transpose()?;
    let data = load_dataset(&args.data)?;
    let need = |p: Option<&crossmodal_core::encoders::EncoderParams<f32>>| {
        p.cloned().ok_or_else(|| Error::Usage("this protocol needs --checkpoint".into()))
    };
    let (report, stem) = match &protocol {
        EvalCommand::Probe { .. } => {
            let v = config.eval_views()?;
            (eval_probe(&data.store, &need(params.as_ref())?, &config, v)?, format!("probe_v{v}"))
        }
        EvalCommand::Retrieve { .. } => (eval_retrieve(&data.store, &need(params.as_ref())?, &config)?, "retrieve".into()),
        EvalCommand::Pairs { .. } => (eval_pairs(&data.store, &need(params.as_ref())?, &config)?, "pairs".into()),
        EvalCommand::Segment { .. } => {
            let regime = config.regime()?;
            let base = match regime {
                Regime::Frozen | Regime::Unfrozen => Some(need(params.as_ref())?),
                Regime::Scratch | Regime::RandomFrozen => None,
            };
            let r = eval_segment(&data.store, data.partition()?, base.as_ref(), &config, regime)?;
            (r, format!("segment_{}_f{}", regime.name(), config.seg_config()?.fraction))
        }
    };
    finish_report(&report, &args.out, &stem, &config)
}

/// Parses `args` and runs the command.
pub fn run_from<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    execute(cli)
}
