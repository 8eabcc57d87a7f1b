use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetKind;
use crate::error::{CignError, Result};
use crate::graph::{preset, TreeSpec};
use crate::trainer::{GridAxis, GridSpec, LrRule, RhoPhase, ScheduleSet, TauSchedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Schedule fields to change relative to the dataset defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub base_lr: Option<f64>,
    pub lr_rule: Option<LrRule>,
    pub momentum: Option<f64>,
    pub tau: Option<TauSchedule>,
    pub rho: Option<Vec<RhoPhase>>,
    pub lambda_ig: Option<f64>,
    pub lambda_balance: Option<f64>,
    pub lambda_f: Option<f64>,
    pub lambda_h: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<u64>,
}

impl ScheduleOverrides {
    pub fn apply(&self, base: ScheduleSet) -> ScheduleSet {
        let o = self.clone();
        ScheduleSet {
            base_lr: o.base_lr.unwrap_or(base.base_lr),
            lr_rule: o.lr_rule.unwrap_or(base.lr_rule),
            momentum: o.momentum.unwrap_or(base.momentum),
            tau: o.tau.unwrap_or(base.tau),
            rho: o.rho.unwrap_or(base.rho),
            lambda_ig: o.lambda_ig.unwrap_or(base.lambda_ig),
            lambda_balance: o.lambda_balance.unwrap_or(base.lambda_balance),
            lambda_f: o.lambda_f.unwrap_or(base.lambda_f),
            lambda_h: o.lambda_h.unwrap_or(base.lambda_h),
            batch_size: o.batch_size.unwrap_or(base.batch_size),
            epochs: o.epochs.unwrap_or(base.epochs),
        }
    }
}

/// One axis of a (sequential) grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxisConfig {
    pub axis: GridAxis,
    pub start: Option<f64>,
    pub stop: Option<f64>,
    pub step: Option<f64>,
    /// Explicit values, instead of a start/stop/step range.
    pub values: Option<Vec<f64>>,
}

impl GridAxisConfig {
    pub fn points(&self) -> Result<Vec<f64>> {
        match (&self.values, self.start, self.stop, self.step) {
            (Some(v), None, None, None) if !v.is_empty() => Ok(v.clone()),
            (None, Some(start), Some(stop), Some(step)) => GridSpec { start, stop, step }.points(),
            _ => Err(CignError::Config(format!(
                "grid axis {} needs either start/stop/step or a non-empty values list",
                self.axis.name()
            ))),
        }
    }
}

/// A training experiment as written in a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in metrics and reports; defaults to the model preset name.
    pub name: Option<String>,
    pub dataset: DatasetKind,
    /// Directory holding the IDX files; defaults to `$CIGN_DATA_ROOT/<dataset>`.
    pub data_dir: Option<PathBuf>,
    /// Named architecture; mutually exclusive with `tree`.
    pub model: Option<String>,
    pub tree: Option<TreeSpec>,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Use only the first N training samples.
    pub train_limit: Option<usize>,
    /// Use only the first N test samples.
    pub test_limit: Option<usize>,
    /// Verify routing invariants at every step.
    #[serde(default)]
    pub check_invariants: bool,
    #[serde(default)]
    pub grid: Vec<GridAxisConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CignError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CignError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CignError::Config(m) => CignError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn tree(&self) -> Result<TreeSpec> {
        match (&self.model, &self.tree) {
            (Some(name), None) => Ok(preset(name)?.spec),
            (None, Some(t)) => Ok(t.clone()),
            _ => Err(CignError::Config("set exactly one of `model` and `tree`".into())),
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().or_else(|| self.model.clone()).unwrap_or_else(|| "custom".into())
    }

    /// Dataset defaults with the overrides applied. Plain MNIST networks use
    /// the single baseline decay coefficient.
    pub fn schedule(&self) -> ScheduleSet {
        let plain = self.tree().is_ok_and(|t| t.branching.is_empty());
        let base = match self.dataset {
            DatasetKind::Mnist if plain => ScheduleSet::mnist_plain(),
            DatasetKind::Mnist => ScheduleSet::mnist(),
            DatasetKind::Fashion => ScheduleSet::fashion(),
        };
        self.schedule.apply(base)
    }

    pub fn validate(&self) -> Result<()> {
        let tree = self.tree()?;
        tree.validate()?;
        self.schedule().validate(&tree)?;
        if self.seeds.is_empty() {
            return Err(CignError::Config("seeds must list at least one seed".into()));
        }
        if tree.input_shape != [1, 28, 28] || tree.classes != 10 {
            return Err(CignError::Config("datasets provide 1x28x28 inputs with 10 classes".into()));
        }
        for g in &self.grid {
            g.points()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        dataset = "mnist"
        model = "mnist-cign-fed"
        out_dir = "runs/x"
    "#;

    #[test]
    fn minimal_config_uses_dataset_schedule() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.schedule(), ScheduleSet::mnist());
        assert_eq!(c.seeds, vec![1]);
        assert_eq!(c.label(), "mnist-cign-fed");
    }

    #[test]
    fn plain_mnist_networks_use_baseline_decay() {
        let c = ExperimentConfig::from_toml(&MINIMAL.replace("mnist-cign-fed", "mnist-baseline")).unwrap();
        let s = c.schedule();
        assert_eq!((s.lambda_f, s.lambda_h), (9e-4, 9e-4));
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_toml(&format!("{MINIMAL}\n[schedule]\nepochs = 2\nlambda_f = 1e-4\n")).unwrap();
        let s = c.schedule();
        assert_eq!(s.epochs, 2);
        assert_eq!(s.lambda_f, 1e-4);
        assert_eq!(s.base_lr, 0.025);
    }

    #[test]
    fn unknown_keys_rejected() {
        for extra in ["colour = 3", "[schedule]\nwarmup = 5"] {
            let e = ExperimentConfig::from_toml(&format!("{MINIMAL}\n{extra}\n")).unwrap_err();
            assert!(matches!(e, CignError::Config(_)), "{extra}");
        }
    }

    #[test]
    fn threshold_bound_checked() {
        let text = format!("{MINIMAL}\n[schedule]\nrho = [{{ from_epoch = 0, value = 0.7 }}]\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CignError::Config(_))));
    }

    #[test]
    fn grid_axes_parse() {
        let text = format!(
            "{MINIMAL}\n[[grid]]\naxis = \"lambda_f\"\nstart = 0.0\nstop = 0.001\nstep = 5e-5\n\n[[grid]]\naxis = \"lambda_balance\"\nvalues = [1.0, 2.0]\n"
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c.grid[0].points().unwrap().len(), 21);
        assert_eq!(c.grid[1].points().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn explicit_tree_accepted() {
        let text = r#"
            dataset = "fashion"
            out_dir = "o"
            [tree]
            classes = 10
            branching = []
            split_f = []
            split_h = []
            leaf_f = [{ kind = "conv2d", kernel = 3, filters = 4 }, { kind = "relu" }, { kind = "fully_connected", width = 10 }]
            router_source = { kind = "independent" }
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.tree().unwrap().leaf_f.len(), 3);
    }
}
