//! Experiment configuration: a TOML document with every default filled
//! in, overridable from the environment.
//!
//! Environment overrides use the `NNA_AAT_` prefix. `NNA_AAT_SEED` sets the
//! top-level `seed`; `NNA_AAT_STAGE1_PEAK_LR` sets `peak_lr` in the
//! `[stage1]` section. Values are read as TOML literals and fall back to
//! plain strings. `NNA_AAT_CONFIG` names the config file itself.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::activation_tables::{build_tanh_table, derive_sigmoid_table, ActivationTables, PwlTable};
use crate::autodiff::{CosineUnit, SteKind};
use crate::error::{Error, Result};
use crate::fixed_point::{pow2, DynamicScaleSet};
use crate::qnn::QuantPolicy;
use crate::training::{ActivityConfig, EvalOptions, ModelDims, OptimConfig, Stage, TaskSpec, TrainConfig};

pub const ENV_PREFIX: &str = "NNA_AAT_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteChoice {
    #[default]
    ClippedCosine,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub scale_set: DynamicScaleSet,
    /// Backward rule for input and hidden-state quantizers.
    pub ste: SteChoice,
    pub ste_frequency: f64,
    pub cosine_unit: CosineUnit,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            scale_set: DynamicScaleSet::standard(),
            ste: SteChoice::ClippedCosine,
            ste_frequency: 1.0,
            cosine_unit: CosineUnit::Bin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TablesConfig {
    /// Serialized tables to use instead of building them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tanh: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigmoid: Option<PathBuf>,
    pub segments: usize,
    pub grid_exp: u32,
}

impl Default for TablesConfig {
    fn default() -> Self {
        TablesConfig {
            tanh: None,
            sigmoid: None,
            segments: crate::activation_tables::DEFAULT_SEGMENTS,
            grid_exp: crate::activation_tables::DEFAULT_GRID_EXP,
        }
    }
}

impl TablesConfig {
    /// Load the configured table files, building whatever is missing.
    pub fn resolve(&self) -> Result<Arc<ActivationTables>> {
        let tanh = match &self.tanh {
            Some(p) => PwlTable::load(p)?,
            None => build_tanh_table(self.segments, pow2(-(self.grid_exp as i32)))?,
        };
        let sigmoid = match &self.sigmoid {
            Some(p) => PwlTable::load(p)?,
            None => derive_sigmoid_table(&tanh)?,
        };
        Ok(Arc::new(ActivationTables::new(tanh, sigmoid)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub task: TaskSpec,
    pub model: ModelDims,
    pub activity: ActivityConfig,
    pub quant: QuantConfig,
    pub tables: TablesConfig,
    pub stage1: OptimConfig,
    pub stage2: OptimConfig,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            task: TaskSpec::default(),
            model: ModelDims::default(),
            activity: ActivityConfig::default(),
            quant: QuantConfig::default(),
            tables: TablesConfig::default(),
            stage1: OptimConfig::default(),
            stage2: OptimConfig {
                eval_every: 250,
                select_best: true,
                ..OptimConfig::constant(1000, 1e-3)
            },
            eval: EvalOptions::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file = toml::from_str::<toml::Table>(text).map_err(|e| Error::Config(e.to_string()))?;
        from_table(defaults_table()?, file)
    }

    /// Defaults, then the file (if any), then `NNA_AAT_*` variables from
    /// `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = defaults_table()?;
        if let Some(p) = path {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let file = toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut table, file);
        }
        apply_env(&mut table, env)?;
        from_table(table, toml::Table::new())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.activity.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.eval.validate()?;
        if self.model.layers == 0 || self.model.hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.quant.ste_frequency > 0.0) {
            return Err(Error::Config("ste_frequency must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            seed: self.seed,
            task: self.task.clone(),
            model: self.model,
            activity: self.activity,
            optim: match stage {
                Stage::I => self.stage1.clone(),
                Stage::II => self.stage2.clone(),
            },
            eval: self.eval.clone(),
        }
    }

    pub fn ste(&self) -> SteKind {
        match self.quant.ste {
            SteChoice::ClippedCosine => SteKind::ClippedCosine {
                frequency: self.quant.ste_frequency,
                unit: self.quant.cosine_unit,
            },
            SteChoice::Identity => SteKind::Identity,
        }
    }

    /// The accelerator policy with these tables.
    pub fn nna_policy(&self, tables: Arc<ActivationTables>) -> QuantPolicy {
        QuantPolicy::nna(tables, self.quant.scale_set.clone()).with_ste(self.ste())
    }
}

fn defaults_table() -> Result<toml::Table> {
    toml::Table::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))
}

fn from_table(mut table: toml::Table, over: toml::Table) -> Result<ExperimentConfig> {
    merge(&mut table, over);
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

// a partial section in the file only replaces the keys it names
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_env(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let defaults = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase(), v)))
        .filter(|(k, _)| k != "config")
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let value = parse_value(&raw);
        let section = key
            .split_once('_')
            .filter(|(s, _)| defaults.get(*s).is_some_and(|v| v.is_table()));
        match section {
            Some((s, field)) => {
                let entry = table
                    .entry(s.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let t = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{s}' is not a section")))?;
                t.insert(field.to_string(), value);
            }
            None if defaults.contains_key(&key) => {
                table.insert(key, value);
            }
            None => {
                return Err(Error::Config(format!(
                    "{ENV_PREFIX}{} does not name a config key",
                    key.to_ascii_uppercase()
                )))
            }
        }
    }
    Ok(())
}
