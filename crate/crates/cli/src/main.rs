use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use optical_core::eval::report_table;
use optical_core::pipeline::{self, ExperimentConfig, RerankMode};

/// Cross-lingual late-interaction retrieval with OT-distilled query encoders.
#[derive(Parser, Debug)]
#[command(name = "optical", version)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.bundle`.
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,
    /// Overrides `paths.work`.
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic pseudo-bilingual bundle.
    Synth,
    /// Build the BM25 index and passage splits.
    Index,
    /// First-stage BM25 run.
    Search {
        /// Query TSV; defaults to the teacher-language queries.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the monolingual teacher on triples.
    TrainTeacher,
    /// Distil the student query encoder on bitext.
    Distill {
        /// Use only the first N bitext pairs.
        #[arg(long)]
        bitext_limit: Option<usize>,
    },
    /// Rerank the first-stage run.
    Rerank {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metrics and paired t-tests against a baseline run.
    Eval {
        /// `name=path`; repeatable. Defaults to the standard runs in the work dir.
        #[arg(long = "run", value_parser = parse_named)]
        runs: Vec<(String, PathBuf)>,
        #[arg(long, default_value = pipeline::BM25_RUN)]
        baseline: String,
    },
    /// Nearest-neighbour alignment of student tokens before and after distillation.
    AlignReport,
    /// Every stage from synth to align-report.
    All,
    /// Distil and rerank at several bitext sizes.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [500, 1000, 5000])]
        sizes: Vec<usize>,
    },
    /// Print the effective config as TOML.
    Config,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Monolingual,
    ZeroShot,
    Optical,
}

impl From<Mode> for RerankMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Monolingual => RerankMode::Monolingual,
            Mode::ZeroShot => RerankMode::ZeroShot,
            Mode::Optical => RerankMode::Optical,
        }
    }
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let msg = record.args().to_string();
            let body = serde_json::from_str::<serde_json::Value>(&msg).unwrap_or(serde_json::Value::String(msg));
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": body,
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(b) = &cli.bundle {
        cfg.paths.bundle = b.clone();
    }
    if let Some(w) = &cli.work {
        cfg.paths.work = w.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => {
            let b = pipeline::cmd_synth(&cfg)?;
            println!(
                "wrote bundle to {} ({} docs, {} queries, {} bitext pairs)",
                cfg.paths.bundle.display(),
                b.corpus.len(),
                b.queries_teacher.len(),
                b.bitext.len()
            );
        }
        Command::Index => {
            let s = pipeline::cmd_index(&cfg)?;
            println!("indexed {} docs, {} passages into {}", s.docs, s.passages, cfg.paths.index().display());
        }
        Command::Search { queries, output } => {
            let run = pipeline::cmd_search(&cfg, queries.as_deref(), output.as_deref())?;
            println!("searched {} queries", run.len());
        }
        Command::TrainTeacher => {
            pipeline::cmd_train_teacher(&cfg)?;
            println!("wrote teacher to {}", cfg.paths.teacher().display());
        }
        Command::Distill { bitext_limit } => {
            if bitext_limit.is_some() {
                cfg.bitext_limit = bitext_limit;
            }
            pipeline::cmd_distill(&cfg)?;
            println!("wrote student to {}", cfg.paths.student().display());
        }
        Command::Rerank { mode, output } => {
            let run = pipeline::cmd_rerank(&cfg, mode.into(), output.as_deref())?;
            println!("reranked {} queries", run.len());
        }
        Command::Eval { runs, baseline } => {
            let runs = if runs.is_empty() {
                pipeline::default_eval_systems(&cfg)
            } else {
                runs
            };
            if runs.is_empty() {
                bail!("no run files found under {}", cfg.paths.runs().display());
            }
            let report = pipeline::cmd_eval(&cfg, &runs, &baseline)?;
            print!("{}", report_table(&report.systems));
        }
        Command::AlignReport => {
            let r = pipeline::cmd_align_report(&cfg)?;
            println!("alignment accuracy before {:.4}, after {:.4}", r.before.accuracy, r.after.accuracy);
        }
        Command::All => {
            let out = pipeline::run_all(&cfg)?;
            print!("{}", report_table(&out.eval.systems));
            println!(
                "alignment accuracy before {:.4}, after {:.4}",
                out.align.before.accuracy, out.align.after.accuracy
            );
        }
        Command::Sweep { sizes } => {
            for p in pipeline::bitext_sweep(&cfg, &sizes)? {
                println!("bitext {:>6}  MAP {:.4}", p.bitext, p.map);
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!(target: "optical", "{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
