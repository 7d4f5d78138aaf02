//! The six subcommands. Each returns the text it wants printed on stdout;
//! artifacts go to the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use moma_core::gradcheck::{self, Corruption, Owner};
use moma_core::nn::Block;
use moma_core::synth::{generate, Dataset, Split, SynthTask, TaskSpec};
use moma_core::trainer::{self, RunKind, TrainRun};
use moma_core::DistillConfig;

use crate::error::{CliError, Result};
use crate::report::{self, EvalContext, ParsedReport};
use crate::{checkpoint, config_file};

#[derive(Debug, Parser)]
#[command(
    name = "moma",
    version,
    about = "Momentum-teacher knowledge distillation on synthetic tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `[optim] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; falls back to `[io] out_dir`, then the working directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetChoice {
    Source,
    Target,
}

impl DatasetChoice {
    fn as_str(self) -> &'static str {
        match self {
            DatasetChoice::Source => "source",
            DatasetChoice::Target => "target",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher on the source task.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a pretrained teacher into a student on the target task.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint written by `pretrain`.
        #[arg(long)]
        teacher: PathBuf,
        /// Force the KL gate instead of deriving it from the regime.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        gamma: Option<u8>,
    },
    /// Cross-entropy baseline on the target task.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Start from this teacher checkpoint instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's encoder and classifier.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the source task for teachers, the target task otherwise.
        #[arg(long, value_enum)]
        dataset: Option<DatasetChoice>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the encoder embeddings as CSV.
        #[arg(long)]
        export_embeddings: bool,
        /// Also write the evaluated dataset as CSV.
        #[arg(long)]
        export_dataset: bool,
    },
    /// Compare analytic and finite-difference gradients of the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at `--seed` (default 0).
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Scale one block's analytic gradient, e.g. `teacher.attn`.
        #[arg(long, hide = true)]
        corrupt_block: Option<String>,
        #[arg(long, hide = true, default_value_t = 1.01)]
        corrupt_factor: f64,
    },
    /// Tabulate metrics reports, with mean ± std per shared tag.
    Compare {
        /// Metrics report files.
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Directory for `compare.txt` and `compare.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain { common } => pretrain(&common),
        Command::Distill { common, teacher, gamma } => distill(&common, &teacher, gamma),
        Command::Finetune { common, init } => finetune(&common, init.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            split,
            export_embeddings,
            export_dataset,
        } => eval(&common, &checkpoint, dataset, &split, export_embeddings, export_dataset),
        Command::Gradcheck {
            common,
            seeds,
            corrupt_block,
            corrupt_factor,
        } => gradcheck_cmd(&common, seeds, corrupt_block.as_deref(), corrupt_factor),
        Command::Compare { reports, out } => compare(&reports, out.as_deref()),
    }
}

fn load_config(common: &Common) -> Result<DistillConfig> {
    let mut config = match &common.config {
        Some(path) => config_file::load(path)?,
        None => DistillConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.optim.seed = seed;
    }
    Ok(config)
}

fn out_dir(common: &Common, config: &DistillConfig) -> Result<PathBuf> {
    let dir = match (&common.out, config.io.out_dir.as_str()) {
        (Some(dir), _) => dir.clone(),
        (None, "") => PathBuf::from("."),
        (None, dir) => PathBuf::from(dir),
    };
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn task(config: &DistillConfig) -> Result<SynthTask> {
    Ok(generate(&TaskSpec::new(config.data.clone(), config.optim.seed)?))
}

fn stem(kind: RunKind) -> &'static str {
    match kind {
        RunKind::Teacher => "teacher",
        RunKind::FtNone => "ft_none",
        RunKind::FtTeacher => "ft_teacher",
        RunKind::Moma => "moma",
    }
}

/// Report text for `stack` on `data`, including the class correlation block.
fn evaluation(run: &TrainRun, data: &Dataset, dataset: &str) -> Result<String> {
    let roles = match run.kind {
        RunKind::Teacher => None,
        _ => run.config.data.aggc_roles.as_deref(),
    };
    let metrics = trainer::evaluate(&run.student, data, roles)?;
    let (embeddings, _) = run.student.export_inference().predict(&data.inputs)?;
    let corr = report::class_correlation_means(&embeddings, &data.labels, data.num_classes)?;
    let ctx = EvalContext {
        tag: run.kind.tag(),
        dataset,
        split: data.split.as_str(),
        seed: run.config.optim.seed,
        step: run.step,
    };
    Ok(report::metrics_text(&run.config, &ctx, &metrics, Some(&corr)))
}

/// Writes checkpoint, loss log and test report for a finished run.
fn finish(run: &TrainRun, dir: &Path, test: &Dataset, dataset: &str) -> Result<String> {
    let name = stem(run.kind);
    let ckpt = dir.join(format!("{name}.ckpt"));
    checkpoint::save(run, &ckpt)?;
    let first = run.step - run.log.len() as u64;
    write(
        &dir.join(format!("{name}.loss.csv")),
        &report::loss_csv(&run.config, first, &run.log),
    )?;
    let text = evaluation(run, test, dataset)?;
    let report_path = dir.join(format!("{name}.report"));
    write(&report_path, &text)?;
    let metrics = ParsedReport::parse(&text, &report_path)?;
    let acc = metrics.metric("accuracy")?.unwrap_or(f64::NAN);
    log::info!("{} finished after {} steps", run.kind.tag(), run.step);
    Ok(format!(
        "{}: {} {} accuracy {acc:.4}\nwrote {}, {}\n",
        run.kind.tag(),
        dataset,
        test.split,
        ckpt.display(),
        report_path.display()
    ))
}

/// A checkpoint whose student can serve as a teacher for `config`.
fn load_teacher(path: &Path, config: &DistillConfig) -> Result<moma_core::nn::ModelStack> {
    let run = checkpoint::load(path)?;
    if run.kind != RunKind::Teacher {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            msg: format!("expected a Teacher checkpoint, found {}", run.kind.tag()),
        });
    }
    trainer::check_teacher_compatible(config, &run.student).map_err(|e| CliError::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(run.student)
}

pub fn pretrain(common: &Common) -> Result<String> {
    let config = load_config(common)?;
    let dir = out_dir(common, &config)?;
    let task = task(&config)?;
    let run = trainer::pretrain_teacher(&config, &task.source.train)?;
    finish(&run, &dir, &task.source.test, "source")
}

pub fn distill(common: &Common, teacher: &Path, gamma: Option<u8>) -> Result<String> {
    let mut config = load_config(common)?;
    if let Some(g) = gamma {
        config.distill.gamma_auto = false;
        config.distill.gamma = g;
    }
    let dir = out_dir(common, &config)?;
    let teacher = load_teacher(teacher, &config)?;
    let task = task(&config)?;
    let mut run = TrainRun::distill(config.clone(), teacher)?;
    run.train_epochs(&task.target.train, config.optim.epochs)?;
    finish(&run, &dir, &task.target.test, "target")
}

pub fn finetune(common: &Common, init: Option<&Path>) -> Result<String> {
    let config = load_config(common)?;
    let dir = out_dir(common, &config)?;
    let teacher = init.map(|p| load_teacher(p, &config)).transpose()?;
    let task = task(&config)?;
    let run = trainer::finetune_baseline(&config, &task.target.train, teacher.as_ref())?;
    finish(&run, &dir, &task.target.test, "target")
}

/// Evaluates with the data settings embedded in the checkpoint; `--seed`
/// selects a different draw of the same task and `--config` is ignored.
pub fn eval(
    common: &Common,
    path: &Path,
    dataset: Option<DatasetChoice>,
    split: &str,
    export_embeddings: bool,
    export_dataset: bool,
) -> Result<String> {
    let split: Split = split.parse()?;
    let mut run = checkpoint::load(path)?;
    if let Some(seed) = common.seed {
        run.config.optim.seed = seed;
    }
    let dir = out_dir(common, &run.config)?;
    let dataset = dataset.unwrap_or(match run.kind {
        RunKind::Teacher => DatasetChoice::Source,
        _ => DatasetChoice::Target,
    });
    let expected = match dataset {
        DatasetChoice::Source => run.config.data.source_classes,
        DatasetChoice::Target => run.config.data.target_classes,
    };
    if run.student.num_classes() != expected {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            msg: format!(
                "model predicts {} classes but the {} task has {expected}",
                run.student.num_classes(),
                dataset.as_str()
            ),
        });
    }
    let task = task(&run.config)?;
    let data = match dataset {
        DatasetChoice::Source => task.source.split(split),
        DatasetChoice::Target => task.target.split(split),
    };
    let name = path
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let base = format!("{name}.{}.{split}", dataset.as_str());
    let text = evaluation(&run, data, dataset.as_str())?;
    let report_path = dir.join(format!("{base}.report"));
    write(&report_path, &text)?;
    let mut out = format!("wrote {}\n", report_path.display());
    if export_embeddings {
        let (embeddings, _) = run.student.export_inference().predict(&data.inputs)?;
        let p = dir.join(format!("{base}.embeddings.csv"));
        let csv = report::embeddings_csv(&run.config, run.kind.tag(), split.as_str(), &embeddings, &data.labels);
        write(&p, &csv)?;
        writeln!(out, "wrote {}", p.display()).unwrap();
    }
    if export_dataset {
        let p = dir.join(format!("{base}.data.csv"));
        write(&p, &report::dataset_csv(&run.config, &[data]))?;
        writeln!(out, "wrote {}", p.display()).unwrap();
    }
    Ok(format!(
        "{}{out}",
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    ))
}

fn parse_corruption(spec: &str, factor: f64) -> Result<Corruption> {
    let bad = || {
        CliError::Usage(format!(
            "--corrupt-block expects owner.block (e.g. teacher.attn), got {spec:?}"
        ))
    };
    let (owner, block) = spec.split_once('.').ok_or_else(bad)?;
    let owner = match owner {
        "student" => Owner::Student,
        "teacher" => Owner::Teacher,
        _ => return Err(bad()),
    };
    let block = Block::ALL.into_iter().find(|b| b.prefix() == block).ok_or_else(bad)?;
    Ok(Corruption { owner, block, factor })
}

pub fn gradcheck_cmd(common: &Common, seeds: u64, corrupt: Option<&str>, factor: f64) -> Result<String> {
    let first = common.seed.unwrap_or(0);
    let config = match &common.config {
        Some(path) => config_file::load(path)?,
        None => gradcheck::tiny_config(first),
    };
    let corrupt = corrupt.map(|s| parse_corruption(s, factor)).transpose()?;
    gradcheck::check_tiny(&config)?;
    let mut merged = Vec::new();
    for seed in first..first + seeds {
        let reports = gradcheck::check_seed(&config, seed, corrupt)?;
        if merged.is_empty() {
            merged = reports;
            continue;
        }
        for (m, r) in merged.iter_mut().zip(reports) {
            if !r.passed() || worse(&r.status, &m.status) {
                *m = r;
            }
        }
    }
    let mut table = format!(
        "gradient check: {seeds} seeds from {first}, step {:e}, tolerance {:e}\n",
        gradcheck::STEP,
        gradcheck::TOLERANCE
    );
    for r in &merged {
        writeln!(table, "{r}").unwrap();
    }
    let failed: Vec<String> = merged.iter().filter(|r| !r.passed()).map(|r| r.label()).collect();
    if failed.is_empty() {
        table.push_str("all blocks PASS\n");
        Ok(table)
    } else {
        print!("{table}");
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

fn worse(a: &gradcheck::BlockStatus, b: &gradcheck::BlockStatus) -> bool {
    use gradcheck::BlockStatus::*;
    match (a, b) {
        (Checked { max_rel_error: x }, Checked { max_rel_error: y }) => x > y,
        (UnexpectedGradient, _) => true,
        _ => false,
    }
}

pub fn compare(paths: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if paths.len() < 2 {
        return Err(CliError::Usage("compare needs at least two reports".into()));
    }
    let reports = paths
        .iter()
        .map(|p| ParsedReport::load(p))
        .collect::<Result<Vec<_>>>()?;
    let rows = report::compare_rows(&reports)?;
    let text = report::compare_text(&rows);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        write(&dir.join("compare.txt"), &text)?;
        write(&dir.join("compare.csv"), &report::compare_csv(&rows))?;
    }
    Ok(text)
}
