use serde::{Deserialize, Serialize};

use crate::error::{CignError, Result};
use crate::graph::TreeSpec;

/// Piecewise-constant learning-rate rule applied to `base_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrRule {
    /// Multiply by `factor` every `every` iterations.
    StepDecay { every: u64, factor: f64 },
    /// Multiply by each `factor` once the iteration reaches its `at`.
    Milestones { milestones: Vec<Milestone> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub at: u64,
    pub factor: f64,
}

/// `max(min, initial * decay^floor(iteration / period))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSchedule {
    pub initial: f64,
    pub decay: f64,
    pub period: u64,
    pub min: f64,
}

/// Threshold `value` applies from epoch `from_epoch` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoPhase {
    pub from_epoch: u64,
    pub value: f64,
}

/// Every schedule and coefficient of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSet {
    pub base_lr: f64,
    pub lr_rule: LrRule,
    pub momentum: f64,
    pub tau: TauSchedule,
    pub rho: Vec<RhoPhase>,
    pub lambda_ig: f64,
    pub lambda_balance: f64,
    /// Weight decay of classification (F) weights.
    pub lambda_f: f64,
    /// Weight decay of router (H) weights.
    pub lambda_h: f64,
    pub batch_size: usize,
    pub epochs: u64,
}

impl ScheduleSet {
    /// MNIST settings for trees with split nodes.
    pub fn mnist() -> Self {
        ScheduleSet {
            base_lr: 0.025,
            lr_rule: LrRule::StepDecay { every: 15_000, factor: 0.5 },
            momentum: 0.9,
            tau: TauSchedule { initial: 25.0, decay: 0.9999, period: 2, min: 1.0 },
            rho: vec![RhoPhase { from_epoch: 0, value: 0.0 }, RhoPhase { from_epoch: 25, value: 0.4 }],
            lambda_ig: 1.0,
            lambda_balance: 2.0,
            lambda_f: 5e-5,
            lambda_h: 9e-4,
            batch_size: 125,
            epochs: 100,
        }
    }

    /// MNIST settings for plain networks with a single weight-decay coefficient.
    pub fn mnist_plain() -> Self {
        ScheduleSet { lambda_f: 9e-4, lambda_h: 9e-4, ..Self::mnist() }
    }

    /// Fashion-MNIST settings; regularized by dropout instead of weight decay.
    pub fn fashion() -> Self {
        ScheduleSet {
            base_lr: 0.01,
            lr_rule: LrRule::Milestones {
                milestones: vec![
                    Milestone { at: 15_000, factor: 0.5 },
                    Milestone { at: 30_000, factor: 0.5 },
                    Milestone { at: 40_000, factor: 0.1 },
                ],
            },
            lambda_balance: 5.0,
            lambda_f: 0.0,
            lambda_h: 0.0,
            ..Self::mnist()
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        match &self.lr_rule {
            LrRule::StepDecay { every, factor } => self.base_lr * factor.powf((iteration / every.max(&1)) as f64),
            LrRule::Milestones { milestones } => {
                milestones.iter().filter(|m| iteration >= m.at).fold(self.base_lr, |lr, m| lr * m.factor)
            }
        }
    }

    pub fn tau_at(&self, iteration: u64) -> f64 {
        let t = &self.tau;
        let steps = (iteration / t.period.max(1)) as f64;
        (t.initial * t.decay.powf(steps)).max(t.min)
    }

    pub fn rho_at(&self, epoch: u64) -> f64 {
        self.rho.iter().filter(|p| p.from_epoch <= epoch).max_by_key(|p| p.from_epoch).map_or(0.0, |p| p.value)
    }

    /// Rejects settings that cannot drive a run of `tree`.
    pub fn validate(&self, tree: &TreeSpec) -> Result<()> {
        let err = |m: String| Err(CignError::Config(m));
        if !(self.base_lr > 0.0) {
            return err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        let t = &self.tau;
        if !(t.min > 0.0) || !(t.initial >= t.min) || !(t.decay > 0.0 && t.decay <= 1.0) || t.period == 0 {
            return err(format!("invalid temperature schedule {t:?}"));
        }
        match &self.lr_rule {
            LrRule::StepDecay { every, factor } if *every == 0 || !(*factor > 0.0) => {
                return err("step_decay needs every >= 1 and a positive factor".into())
            }
            LrRule::Milestones { milestones } if milestones.iter().any(|m| !(m.factor > 0.0)) => {
                return err("milestone factors must be positive".into())
            }
            _ => {}
        }
        for (name, v) in [
            ("lambda_ig", self.lambda_ig),
            ("lambda_balance", self.lambda_balance),
            ("lambda_f", self.lambda_f),
            ("lambda_h", self.lambda_h),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if let Some(&k) = tree.branching.iter().max() {
            for p in &self.rho {
                if !(p.value >= 0.0) || p.value > 1.0 / k as f64 + 1e-12 {
                    return err(format!("threshold {} from epoch {} outside [0, 1/{k}]", p.value, p.from_epoch));
                }
            }
        }
        Ok(())
    }
}
