//! Train the same small model with and without the activity penalty and
//! compare where the gate pre-activations land.
use std::sync::Arc;

use nna_aat::activation_tables::ActivationTables;
use nna_aat::config::ExperimentConfig;
use nna_aat::experiment::analyze_model;
use nna_aat::training::{gen_task, stage1_train, ModelDims, OptimConfig, Split, Stage, TaskSpec};

fn main() -> nna_aat::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.task = TaskSpec {
        seq_len: 10,
        train_size: 1000,
        ..TaskSpec::default()
    };
    cfg.model = ModelDims { layers: 1, hidden: 16 };
    cfg.stage1 = OptimConfig {
        steps: 600,
        hold_steps: 200,
        ..OptimConfig::default()
    };
    let policy = cfg.nna_policy(Arc::new(ActivationTables::standard()));
    let test = gen_task(&cfg.task, cfg.seed, Split::Test)?;

    for lambda in [0.0, 2.0] {
        cfg.activity.lambda = lambda;
        let trained = stage1_train(&cfg.train_config(Stage::I))?;
        let report = analyze_model(&trained.model, &test, &policy, &cfg)?;
        println!("===== lambda = {lambda} =====");
        print!("{}", report.to_text());
        println!();
    }
    Ok(())
}
