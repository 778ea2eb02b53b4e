//! Command-line driver.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or other failure |
//! | 2 | configuration or usage error |
//! | 3 | invariant violation (corrupt file, unmet error budget, overflow) |
//! | 4 | divergence (golden mismatch, non-finite training loss) |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::activation_tables::{ActivationKind, ActivationTables, PwlTable, TableReport, ERROR_BUDGET};
use crate::checkpoint::{model_from_file, model_to_file, TensorFile};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{analyze_model, run_experiment, write_run_header};
use crate::fixed_point::QFormat;
use crate::golden::{golden_run, input_from_file, input_to_file, verify, GoldenTrace};
use crate::nna_engine::IntNetwork;
use crate::training::{baseline_train, gen_task, stage1_train, stage2_train, write_metrics_log, Split, Stage};

/// Range of the accuracy reports and exported data series.
const REPORT_RANGE: f64 = 8.0;

#[derive(Debug, Parser)]
#[command(name = "nna-aat", version, about = "Fixed-point accelerator emulation and accelerator-aware training")]
pub struct Cli {
    /// TOML experiment config; defaults are used for anything missing.
    #[arg(long, global = true, env = "NNA_AAT_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "NNA_AAT_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "NNA_AAT_OUT")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build, inspect and export activation tables.
    Tables {
        #[command(subcommand)]
        action: TablesAction,
    },
    /// Pre-activation range and quantization error analysis of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Directory holding tanh.pwl and sigmoid.pwl.
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Generate or verify integer golden traces.
    Golden {
        #[command(subcommand)]
        action: GoldenAction,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Starting checkpoint (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Baseline, stage I, stage II and the summary table.
    Experiment {
        #[arg(long)]
        tables: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TablesAction {
    /// Build tanh and sigmoid tables (or re-import table files) and report
    /// their accuracy.
    Build {
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long)]
        grid_exp: Option<u32>,
        /// Table files to use instead of building; the kind is read from
        /// each file.
        #[arg(long)]
        import: Vec<PathBuf>,
    },
    /// Validate a table file and print its accuracy report.
    Inspect { file: PathBuf },
    /// Write a table and its (x, true, approx, grad) series.
    Export {
        file: PathBuf,
        #[arg(long, default_value_t = 1601)]
        points: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum GoldenAction {
    /// Run the integer engine and record every intermediate code.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input sequence file; without it, an example of the configured
        /// task's test split is used and written out.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Replay through the float emulator and compare every probe.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        tables: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Baseline,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Policy(_) | Error::InvalidScaleSet(_) | Error::InvalidFormat { .. } | Error::TableParams(_) => 2,
        Error::Invariant { .. }
        | Error::Parse { .. }
        | Error::Format(_)
        | Error::TableBudget { .. }
        | Error::CodeOutOfRange { .. }
        | Error::Overflow(_)
        | Error::NonFinite { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

/// Resolve the configuration: defaults, file, environment, then flags.
pub fn resolve_config(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), env)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn load_tables(dir: Option<&Path>, cfg: &ExperimentConfig) -> Result<Arc<ActivationTables>> {
    match dir {
        Some(d) => Ok(Arc::new(ActivationTables::new(
            PwlTable::load(d.join("tanh.pwl"))?,
            PwlTable::load(d.join("sigmoid.pwl"))?,
        )?)),
        None => cfg.tables.resolve(),
    }
}

fn report_text(r: &TableReport) -> String {
    format!(
        "{:<8} max|err| {:.6} at x = {:+.6}  mean|err| {:.3e}  codes used {}/256  monotone {}  budget {}\n",
        r.function.name(),
        r.max_abs_error,
        r.argmax_error,
        r.mean_abs_error,
        r.codes_used,
        if r.monotone { "yes" } else { "NO" },
        if r.max_abs_error <= ERROR_BUDGET { "met" } else { "EXCEEDED" },
    )
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, s + "\n")?;
    Ok(())
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("resolved_config.toml"), cfg.to_toml()?)?;
    Ok(&cfg.out)
}

/// Run a parsed command; progress and reports go to stdout.
pub fn run(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let cfg = resolve_config(cli, env)?;
    match &cli.command {
        Command::Tables { action } => cmd_tables(action, &cfg),
        Command::Analyze { checkpoint, split, tables } => {
            let tables = load_tables(tables.as_deref(), &cfg)?;
            let model = model_from_file(&TensorFile::load(checkpoint)?)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let data = gen_task(&cfg.task, cfg.seed, split)?;
            let report = analyze_model(&model, &data, &cfg.nna_policy(tables), &cfg)?;
            let out = prepare_out(&cfg)?;
            let text = report.to_text();
            std::fs::write(out.join("analysis.txt"), &text)?;
            write_json(&out.join("analysis.json"), &report)?;
            print!("{text}");
            Ok(())
        }
        Command::Golden { action } => cmd_golden(action, &cfg),
        Command::Train { stage, init, tables } => {
            let out = prepare_out(&cfg)?;
            let (name, outcome) = match stage {
                StageArg::Baseline => ("baseline", baseline_train(&cfg.train_config(Stage::I))?),
                StageArg::One => ("stage1", stage1_train(&cfg.train_config(Stage::I))?),
                StageArg::Two => {
                    let init = init
                        .as_ref()
                        .ok_or_else(|| Error::Config("stage 2 needs --init <checkpoint>".into()))?;
                    let model = model_from_file(&TensorFile::load(init)?)?;
                    let policy = cfg.nna_policy(load_tables(tables.as_deref(), &cfg)?);
                    ("stage2", stage2_train(&cfg.train_config(Stage::II), &model, &policy)?)
                }
            };
            model_to_file(&outcome.model, Some(QFormat::Q1_7)).save(out.join(format!("{name}.ckpt")))?;
            write_metrics_log(out.join(format!("{name}_metrics.jsonl")), &outcome.log)?;
            write_json(&out.join(format!("{name}_final.json")), &outcome.last)?;
            println!(
                "{name}: val loss {:.6} -> {:.6}, accuracy {:.4} -> {:.4}, z outside range {:.6} -> {:.6}",
                outcome.initial.loss,
                outcome.last.loss,
                outcome.initial.accuracy,
                outcome.last.accuracy,
                outcome.initial.out_of_range_fraction,
                outcome.last.out_of_range_fraction
            );
            if outcome.selected_step != outcome.log.last().map_or(0, |r| r.step) {
                println!("kept the checkpoint from step {}", outcome.selected_step);
            }
            println!("wrote {}", out.join(format!("{name}.ckpt")).display());
            Ok(())
        }
        Command::Experiment { tables } => {
            let tables = load_tables(tables.as_deref(), &cfg)?;
            let run = run_experiment(&cfg, tables, Some(&cfg.out))?;
            print!("{}", run.summary.to_text());
            println!("artifacts in {}", cfg.out.display());
            Ok(())
        }
    }
}

fn cmd_tables(action: &TablesAction, cfg: &ExperimentConfig) -> Result<()> {
    match action {
        TablesAction::Build { segments, grid_exp, import } => {
            let mut tcfg = cfg.tables.clone();
            if let Some(s) = segments {
                tcfg.segments = *s;
            }
            if let Some(g) = grid_exp {
                tcfg.grid_exp = *g;
            }
            for path in import {
                let t = PwlTable::load(path)?;
                match t.kind() {
                    ActivationKind::Tanh => tcfg.tanh = Some(path.clone()),
                    ActivationKind::Sigmoid => tcfg.sigmoid = Some(path.clone()),
                }
            }
            let tables = tcfg.resolve()?;
            let cfg = ExperimentConfig { tables: tcfg, ..cfg.clone() };
            let out = prepare_out(&cfg)?;
            let reports = [tables.tanh.accuracy(REPORT_RANGE), tables.sigmoid.accuracy(REPORT_RANGE)];
            tables.tanh.save(out.join("tanh.pwl"))?;
            tables.sigmoid.save(out.join("sigmoid.pwl"))?;
            let text: String = reports.iter().map(report_text).collect();
            std::fs::write(out.join("tables_report.txt"), &text)?;
            write_json(&out.join("tables_report.json"), &reports)?;
            print!("{text}");
            println!("wrote {} and {}", out.join("tanh.pwl").display(), out.join("sigmoid.pwl").display());
            budget_check(&reports)
        }
        TablesAction::Inspect { file } => {
            let t = PwlTable::load(file)?;
            let r = t.accuracy(REPORT_RANGE);
            let (lo, hi) = t.saturation();
            println!(
                "{}: {} segments, grid 2^-{}, saturates below {} and above {}",
                file.display(),
                t.segments().len(),
                t.grid_exp(),
                lo,
                hi
            );
            print!("{}", report_text(&r));
            budget_check(&[r])
        }
        TablesAction::Export { file, points } => {
            let t = PwlTable::load(file)?;
            if *points < 2 {
                return Err(Error::Config("--points must be at least 2".into()));
            }
            let out = prepare_out(cfg)?;
            let name = t.kind().name();
            t.save(out.join(format!("{name}.pwl")))?;
            let mut csv = String::from("x,true,approx,grad\n");
            for i in 0..*points {
                let x = -REPORT_RANGE + 2.0 * REPORT_RANGE * i as f64 / (*points - 1) as f64;
                let _ = writeln!(csv, "{x},{},{},{}", t.kind().eval(x), t.eval(x), t.kind().derivative(x));
            }
            let series = out.join(format!("{name}_series.csv"));
            std::fs::write(&series, csv)?;
            println!("wrote {} and {}", out.join(format!("{name}.pwl")).display(), series.display());
            Ok(())
        }
    }
}

fn budget_check(reports: &[TableReport]) -> Result<()> {
    for r in reports {
        if r.max_abs_error > ERROR_BUDGET {
            return Err(Error::TableBudget {
                max_error: r.max_abs_error,
                budget: ERROR_BUDGET,
            });
        }
        if !r.monotone {
            return Err(Error::Invariant {
                field: "monotonicity",
                msg: format!("{} table is not monotone", r.function.name()),
            });
        }
    }
    Ok(())
}

fn cmd_golden(action: &GoldenAction, cfg: &ExperimentConfig) -> Result<()> {
    match action {
        GoldenAction::Generate {
            checkpoint,
            input,
            example,
            tables,
        } => {
            let tables = load_tables(tables.as_deref(), cfg)?;
            let policy = cfg.nna_policy(tables.clone());
            let model = model_from_file(&TensorFile::load(checkpoint)?)?;
            let out = cfg.out.as_path();
            write_run_header(out, cfg, &tables)?;
            let seq = match input {
                Some(p) => input_from_file(&TensorFile::load(p)?)?,
                None => {
                    let data = gen_task(&cfg.task, cfg.seed, Split::Test)?;
                    data.inputs
                        .get(*example)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("test split has no example {example}")))?
                }
            };
            input_to_file(&seq).save(out.join("input.bin"))?;
            let trace = golden_run(&model, &policy, &seq)?;
            let saturations = IntNetwork::from_model(&model, &policy)?.run(&seq)?.saturations();
            trace.save(out.join("golden.trace"))?;
            println!(
                "golden trace: {} steps, {} layers, {} records, {} cell saturations",
                trace.steps,
                trace.layers,
                trace.records.len(),
                saturations
            );
            println!("wrote {}", out.join("golden.trace").display());
            Ok(())
        }
        GoldenAction::Verify {
            checkpoint,
            input,
            trace,
            tables,
        } => {
            let tables = load_tables(tables.as_deref(), cfg)?;
            let policy = cfg.nna_policy(tables);
            let model = model_from_file(&TensorFile::load(checkpoint)?)?;
            let seq = input_from_file(&TensorFile::load(input)?)?;
            let stored = GoldenTrace::load(trace)?;
            match verify(&stored, &model, &policy, &seq)? {
                None => {
                    println!("PASS: {} records match bit for bit", stored.records.len());
                    Ok(())
                }
                Some(d) => {
                    println!("FAIL: first divergence at {d}");
                    Err(Error::Divergence {
                        step: d.step as usize,
                        msg: d.to_string(),
                    })
                }
            }
        }
    }
}
