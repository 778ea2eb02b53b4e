//! The FP / PTQ / AAT comparison pipeline and the range analysis report.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::activation_tables::ActivationTables;
use crate::checkpoint::model_to_file;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fixed_point::QFormat;
use crate::qnn::{Model, QuantPolicy};
use crate::training::{
    baseline_train, evaluate, gen_task, quantization_mse, stage1_train, stage2_train, write_metrics_log,
    Dataset, EvalMetrics, Split, Stage, TrainOutcome, GATE_NAMES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub accuracy: f64,
    pub loss: f64,
    /// `(accuracy - fp_accuracy) / fp_accuracy`; positive is better.
    pub relative_delta: f64,
    pub out_of_range_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
}

pub const ROW_FP: &str = "baseline-fp";
pub const ROW_PTQ: &str = "baseline-quantized";
pub const ROW_STAGE1: &str = "stage1-quantized";
pub const ROW_STAGE2: &str = "stage2-quantized";

impl ExperimentSummary {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed {}\n", self.seed);
        let _ = writeln!(
            s,
            "{:<20} {:>9} {:>11} {:>10} {:>12}",
            "model", "accuracy", "loss", "rel.delta", "z outside"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>9.4} {:>11.6} {:>+10.4} {:>12.6}",
                r.name, r.accuracy, r.loss, r.relative_delta, r.out_of_range_fraction
            );
        }
        s
    }
}

fn relative(acc: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        (acc - reference) / reference
    } else {
        0.0
    }
}

/// Everything the pipeline produced.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub summary: ExperimentSummary,
    pub baseline: TrainOutcome,
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
}

fn save_stage(out: Option<&Path>, name: &str, outcome: &TrainOutcome) -> Result<()> {
    if let Some(dir) = out {
        model_to_file(&outcome.model, Some(QFormat::Q1_7)).save(dir.join(format!("{name}.ckpt")))?;
        write_metrics_log(dir.join(format!("{name}_metrics.jsonl")), &outcome.log)?;
    }
    Ok(())
}

/// Write the resolved config and the tables in use into `dir`.
pub fn write_run_header(dir: &Path, cfg: &ExperimentConfig, tables: &ActivationTables) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml()?)?;
    tables.tanh.save(dir.join("tanh.pwl"))?;
    tables.sigmoid.save(dir.join("sigmoid.pwl"))?;
    Ok(())
}

/// Baseline training, stage I, stage II, then evaluation of all four
/// rows on the test split. Artifacts are written to `out` as each stage
/// finishes, so a failure keeps whatever was already produced.
pub fn run_experiment(cfg: &ExperimentConfig, tables: Arc<ActivationTables>, out: Option<&Path>) -> Result<ExperimentRun> {
    cfg.validate()?;
    if let Some(dir) = out {
        write_run_header(dir, cfg, &tables)?;
    }
    let policy = cfg.nna_policy(tables);
    let stage1_cfg = cfg.train_config(Stage::I);

    let baseline = baseline_train(&stage1_cfg)?;
    save_stage(out, "baseline", &baseline)?;
    let stage1 = if cfg.activity.lambda == 0.0 {
        baseline.clone()
    } else {
        stage1_train(&stage1_cfg)?
    };
    save_stage(out, "stage1", &stage1)?;
    let stage2 = stage2_train(&cfg.train_config(Stage::II), &stage1.model, &policy)?;
    save_stage(out, "stage2", &stage2)?;

    let test = gen_task(&cfg.task, cfg.seed, Split::Test)?;
    let eval = |m: &Model, p: &QuantPolicy| evaluate(m, &test, p, &cfg.task, &cfg.activity, &cfg.eval);
    let fp = eval(&baseline.model, &QuantPolicy::off())?;
    let rows_in = [
        (ROW_FP, fp.clone()),
        (ROW_PTQ, eval(&baseline.model, &policy)?),
        (ROW_STAGE1, eval(&stage1.model, &policy)?),
        (ROW_STAGE2, eval(&stage2.model, &policy)?),
    ];
    let rows = rows_in
        .into_iter()
        .map(|(name, m)| SummaryRow {
            name: name.to_string(),
            accuracy: m.accuracy,
            loss: m.loss,
            relative_delta: relative(m.accuracy, fp.accuracy),
            out_of_range_fraction: m.out_of_range_fraction,
        })
        .collect();
    let summary = ExperimentSummary { seed: cfg.seed, rows };
    if let Some(dir) = out {
        std::fs::write(dir.join("summary.txt"), summary.to_text())?;
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("summary.json"), json + "\n")?;
    }
    Ok(ExperimentRun {
        summary,
        baseline,
        stage1,
        stage2,
    })
}

/// Range and quantization analysis of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub full_precision: EvalMetrics,
    pub quantized: EvalMetrics,
    /// Relative accuracy change from full precision to the accelerator
    /// policy.
    pub ptq_delta: f64,
    /// Per-tensor mean squared quantization error under the policy.
    pub quantization_mse: Vec<(String, f64)>,
}

pub fn analyze_model(
    model: &Model,
    data: &Dataset,
    policy: &QuantPolicy,
    cfg: &ExperimentConfig,
) -> Result<AnalysisReport> {
    let fp = evaluate(model, data, &QuantPolicy::off(), &cfg.task, &cfg.activity, &cfg.eval)?;
    let q = evaluate(model, data, policy, &cfg.task, &cfg.activity, &cfg.eval)?;
    Ok(AnalysisReport {
        ptq_delta: relative(q.accuracy, fp.accuracy),
        quantization_mse: quantization_mse(model, policy)?,
        full_precision: fp,
        quantized: q,
    })
}

impl AnalysisReport {
    pub fn to_text(&self) -> String {
        let m = &self.full_precision;
        let mut s = String::new();
        let _ = writeln!(s, "accuracy   fp {:.4}  quantized {:.4}  delta {:+.4}", m.accuracy, self.quantized.accuracy, self.ptq_delta);
        let _ = writeln!(s, "loss       fp {:.6}  quantized {:.6}", m.loss, self.quantized.loss);
        let _ = writeln!(s, "gate inputs {}", m.z_count);
        let _ = writeln!(s, "outside activity range  {:.6}", m.out_of_range_fraction);
        let _ = writeln!(s, "in 4 < |z| < 7 band     {:.6}", m.error_band_fraction);
        let _ = writeln!(s, "past table saturation   {}", m.saturated);
        let h = &m.histogram;
        let _ = write!(s, "\nz histogram {:>12}", "bucket");
        for g in GATE_NAMES {
            let _ = write!(s, " {g:>9}");
        }
        s.push('\n');
        for b in 0..h.edges.len() + 1 {
            let label = match b {
                0 => format!("< {}", h.edges[0]),
                b if b == h.edges.len() => format!(">= {}", h.edges[b - 1]),
                b => format!("[{}, {})", h.edges[b - 1], h.edges[b]),
            };
            let _ = write!(s, "{:>24}", label);
            for g in 0..4 {
                let _ = write!(s, " {:>9}", h.counts[g][b]);
            }
            s.push('\n');
        }
        s.push_str("\nquantization mse\n");
        for (name, v) in &self.quantization_mse {
            let _ = writeln!(s, "  {name:<14} {v:.3e}");
        }
        s
    }
}
