//! The whole comparison on a reduced adding problem: full precision,
//! post-training quantization, stage I and stage II.
//!
//! Pass an output directory as the first argument to keep the artifacts.
use std::path::PathBuf;

use nna_aat::config::ExperimentConfig;
use nna_aat::experiment::run_experiment;
use nna_aat::training::{ModelDims, OptimConfig, TaskSpec};

fn main() -> nna_aat::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let mut cfg = ExperimentConfig::default();
    cfg.task = TaskSpec {
        seq_len: 12,
        train_size: 2000,
        ..TaskSpec::default()
    };
    cfg.model = ModelDims { layers: 2, hidden: 16 };
    cfg.stage1 = OptimConfig {
        steps: 1200,
        hold_steps: 400,
        ..OptimConfig::default()
    };
    cfg.stage2 = OptimConfig::constant(400, 1e-3);

    let tables = cfg.tables.resolve()?;
    let run = run_experiment(&cfg, tables, out.as_deref())?;
    print!("{}", run.summary.to_text());
    for (name, o) in [("baseline", &run.baseline), ("stage1", &run.stage1), ("stage2", &run.stage2)] {
        println!(
            "{name:<9} val accuracy {:.4} -> {:.4} over {} logged evaluations",
            o.initial.accuracy,
            o.last.accuracy,
            o.log.len()
        );
    }
    Ok(())
}
