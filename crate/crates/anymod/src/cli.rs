//! Command-line front end.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anymod_core::cohort::Split;
use anymod_core::error::ErrorClass;
use anymod_core::finetune::{EpochLog, Task, TaskModel};
use anymod_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::bav::io_error;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::manifest::{write_cohort, MANIFEST_SCHEMA};
use crate::pipeline::{self, FINETUNED_CHECKPOINT};
use crate::report::{self, read_report_csv, write_report, ReportRow, REPORT_SCHEMA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PROTOCOL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "anymod", about = "Any-subset multi-modal 3D masked autoencoder: cohorts, pretraining, finetuning and evaluation sweeps")]
#[command(disable_version_flag = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Print artifact and schema versions.
    #[arg(long)]
    pub version: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (volumes, atlas, manifest).
    GenCohort,
    /// Pretrain the encoder.
    Pretrain {
        #[arg(long, value_parser = ["rcmd", "pacm", "both"])]
        ablate: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finetune a task head on a pretrained (or fresh) encoder.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Evaluate a finetuned checkpoint on the validation and test splits.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Within-subject sweep over the designated modality combinations.
    Robustness {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Finetune on nested fractions of the training labels.
    LabelEfficiency {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Export final-layer CLS attention maps and region scores.
    AttentionMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subject: Vec<String>,
    },
    /// Dump mask plans and importance vectors of one pretraining step.
    DumpMasks {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Turn report CSVs into line-chart data.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        report: Vec<PathBuf>,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| io_error(&self.out, e))?;
        let p = self.out.join(RESOLVED_CONFIG_FILE);
        fs::write(&p, self.cfg.to_json()).map_err(|e| io_error(&p, e))
    }

    fn task(&self, flag: &Option<String>) -> Result<Task> {
        flag.as_deref().map(Task::parse).unwrap_or(Ok(self.cfg.eval.task))
    }
}

pub fn version_text() -> String {
    format!(
        "anymod {}\ncheckpoint format BCK1 v{}\nmanifest schema v{}\nreport schema v{}\n",
        env!("CARGO_PKG_VERSION"),
        crate::checkpoint::CHECKPOINT_VERSION,
        MANIFEST_SCHEMA,
        REPORT_SCHEMA
    )
}

fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Protocol => EXIT_PROTOCOL,
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.global.version {
        print!("{}", version_text());
        return EXIT_OK;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return EXIT_CONFIG;
    };
    match run(&cli.global, command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let kind = match e.class() {
                ErrorClass::Config => "config",
                ErrorClass::Data => "data",
                ErrorClass::Protocol => "protocol",
            };
            let msg = serde_json::json!({ "error": kind, "exit_code": code, "message": e.to_string() });
            let _ = writeln!(std::io::stderr(), "{msg}");
            code
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

fn run(g: &GlobalArgs, command: Command) -> Result<()> {
    let mut cfg = load_config(g)?;
    if let Command::Pretrain { ablate: Some(a), .. } = &command {
        pipeline::apply_ablation(&mut cfg, a)?;
    }
    cfg.validate()?;
    if let Some(j) = g.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        // A pool may already exist when dispatch runs more than once in a
        // process; the first setting wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let ctx = Ctx { cfg, out: g.out_dir.clone(), quiet: g.quiet };
    match command {
        Command::GenCohort => gen_cohort(&ctx),
        Command::Pretrain { resume, .. } => pretrain(&ctx, resume.as_deref()),
        Command::Finetune { checkpoint, task } => finetune(&ctx, checkpoint.as_deref(), ctx.task(&task)?),
        Command::Evaluate { checkpoint } => evaluate(&ctx, &checkpoint),
        Command::Robustness { checkpoint, task } => robustness(&ctx, checkpoint.as_deref(), ctx.task(&task)?),
        Command::LabelEfficiency { checkpoint, task } => label_efficiency(&ctx, checkpoint.as_deref(), ctx.task(&task)?),
        Command::AttentionMap { checkpoint, subject } => attention(&ctx, &checkpoint, subject),
        Command::DumpMasks { checkpoint, step } => dump_masks(&ctx, checkpoint.as_deref(), step),
        Command::Plot { report } => plot(&ctx, &report),
    }
}

fn gen_cohort(ctx: &Ctx) -> Result<()> {
    let (cohort, atlas, _) = anymod_core::cohort::generate_synthetic_cohort(&ctx.cfg.cohort.synthetic)?;
    ctx.prepare_out()?;
    let path = write_cohort(&ctx.out.join("cohort"), &cohort, Some(&atlas))?;
    ctx.say(format!("wrote {} subjects to {}", cohort.subjects.len(), path.display()));
    Ok(())
}

fn pretrain(ctx: &Ctx, resume: Option<&Path>) -> Result<()> {
    let resume = match resume {
        Some(p) => {
            let c = load_checkpoint(p)?;
            Some(c.train_state()?)
        }
        None => None,
    };
    let (cohort, atlas) = pipeline::load_cohort(&ctx.cfg)?;
    ctx.prepare_out()?;
    let state = pipeline::pretrain(&ctx.cfg, &cohort, atlas.as_ref(), resume, Some(&ctx.out), |l| {
        if !ctx.quiet && l.step % 10 == 0 {
            eprintln!("step {} l_mae {:?} l_rcmd {:?} lr {:.3e}", l.step, l.l_mae, l.l_rcmd, l.lr);
        }
    })?;
    ctx.say(format!("pretraining finished at step {}", state.step));
    Ok(())
}

fn finetune(ctx: &Ctx, checkpoint: Option<&Path>, task: Task) -> Result<()> {
    let ckpt = checkpoint.map(load_checkpoint).transpose()?;
    let init = pipeline::init_for_finetune(&ctx.cfg, ckpt.as_ref())?;
    let (cohort, _) = pipeline::load_cohort(&ctx.cfg)?;
    ctx.prepare_out()?;
    let mut history = Vec::new();
    let mut hook = |_: &TaskModel, l: &EpochLog| {
        if !ctx.quiet {
            eprintln!("epoch {} train {:.4} val {:.4}{}", l.epoch, l.train_loss, l.val_loss, if l.frozen { " (frozen)" } else { "" });
        }
        history.push(*l);
    };
    let seed = ctx.cfg.finetune.seed;
    let outcome = pipeline::finetune_task(&init, &ctx.cfg, task, &cohort, seed, Some(&mut hook))?;
    write_epoch_log(&ctx.out.join("finetune_log.csv"), &history)?;
    pipeline::save_task_model(&ctx.out.join(FINETUNED_CHECKPOINT), &outcome.best, &ctx.cfg, seed, outcome.best_epoch)?;
    let rows = pipeline::evaluate_rows(&outcome.best, &cohort, &[Split::Val], seed)?;
    write_report(&ctx.out, "finetune_report", &rows)?;
    ctx.say(format!("best epoch {} (val loss {:.4})", outcome.best_epoch, outcome.best_val_loss));
    Ok(())
}

fn write_epoch_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for l in history {
        w.serialize(l).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn evaluate(ctx: &Ctx, checkpoint: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let tm = pipeline::load_task_model(&ckpt)?;
    let (cohort, _) = pipeline::load_cohort(&ctx.cfg)?;
    ctx.prepare_out()?;
    let rows = pipeline::evaluate_rows(&tm, &cohort, &[Split::Val, Split::Test], ckpt.header.rng.seed)?;
    write_report(&ctx.out, "evaluate_report", &rows)
}

/// Finetuned models to sweep: the checkpoint itself when it is already
/// finetuned, otherwise one finetune per configured seed.
fn task_models(ctx: &Ctx, checkpoint: Option<&Path>, task: Task, cohort: &anymod_core::cohort::Cohort) -> Result<Vec<(u64, TaskModel)>> {
    let ckpt = checkpoint.map(load_checkpoint).transpose()?;
    if let Some(c) = &ckpt {
        if c.header.kind == CheckpointKind::Finetune {
            let tm = c.task_model()?;
            if tm.task != task {
                return Err(Error::Config(format!("checkpoint was finetuned for {}, not {task}", tm.task)));
            }
            return Ok(vec![(c.header.rng.seed, tm)]);
        }
    }
    let init = pipeline::init_for_finetune(&ctx.cfg, ckpt.as_ref())?;
    let mut out = Vec::new();
    for &seed in &ctx.cfg.eval.seeds {
        ctx.say(format!("finetuning {task} with seed {seed}"));
        out.push((seed, pipeline::finetune_task(&init, &ctx.cfg, task, cohort, seed, None)?.best));
    }
    Ok(out)
}

fn robustness(ctx: &Ctx, checkpoint: Option<&Path>, task: Task) -> Result<()> {
    let (cohort, _) = pipeline::load_cohort(&ctx.cfg)?;
    let models = task_models(ctx, checkpoint, task, &cohort)?;
    let mut rows: Vec<ReportRow> = Vec::new();
    for (seed, tm) in &models {
        rows.extend(pipeline::robustness_rows(tm, &cohort, *seed)?);
    }
    ctx.prepare_out()?;
    write_report(&ctx.out, "robustness", &rows)?;
    write_plot(&ctx.out, &rows)
}

fn label_efficiency(ctx: &Ctx, checkpoint: Option<&Path>, task: Task) -> Result<()> {
    let ckpt = checkpoint.map(load_checkpoint).transpose()?;
    let init = pipeline::init_for_finetune(&ctx.cfg, ckpt.as_ref())?;
    let (cohort, _) = pipeline::load_cohort(&ctx.cfg)?;
    let mut rows = Vec::new();
    for &seed in &ctx.cfg.eval.seeds {
        ctx.say(format!("label-efficiency sweep for {task} with seed {seed}"));
        rows.extend(pipeline::label_efficiency_rows(&init, &ctx.cfg, task, &cohort, seed)?);
    }
    ctx.prepare_out()?;
    write_report(&ctx.out, "label_efficiency", &rows)?;
    write_plot(&ctx.out, &rows)
}

fn attention(ctx: &Ctx, checkpoint: &Path, subjects: Vec<String>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = pipeline::init_for_finetune(&ctx.cfg, Some(&ckpt))?;
    let (cohort, atlas) = pipeline::load_cohort(&ctx.cfg)?;
    let membership = pipeline::membership(atlas.as_ref(), &model)?;
    let wanted = if subjects.is_empty() { ctx.cfg.eval.subjects.clone() } else { subjects };
    let chosen: Vec<_> = if wanted.is_empty() {
        pipeline::split(&cohort, Split::Test)
    } else {
        wanted
            .iter()
            .map(|id| cohort.subjects.iter().find(|s| &s.id == id).ok_or_else(|| Error::Data(format!("unknown subject {id}"))))
            .collect::<Result<_>>()?
    };
    ctx.prepare_out()?;
    let dir = ctx.out.join("attention");
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let mut index = Vec::new();
    for s in chosen {
        index.push(pipeline::export_attention(&model, s, membership.as_ref(), &dir)?.2);
    }
    report::write_json(&dir.join("index.json"), &index)
}

fn dump_masks(ctx: &Ctx, checkpoint: Option<&Path>, step: u64) -> Result<()> {
    let state = match checkpoint {
        Some(p) => Some(load_checkpoint(p)?.train_state()?),
        None => None,
    };
    let (cohort, atlas) = pipeline::load_cohort(&ctx.cfg)?;
    let dump = pipeline::dump_masks(&ctx.cfg, &cohort, atlas.as_ref(), state, step)?;
    ctx.prepare_out()?;
    report::write_json(&ctx.out.join(format!("masks_step_{step:06}.json")), &dump)
}

fn write_plot(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    let points = report::plot_points(rows);
    report::write_plot_csv(&dir.join("plot_data.csv"), &points)?;
    report::write_json(&dir.join("plot_data.json"), &report::plot_data(&points))
}

fn plot(ctx: &Ctx, reports: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    for r in reports {
        rows.extend(read_report_csv(r)?);
    }
    ctx.prepare_out()?;
    write_plot(&ctx.out, &rows)
}
