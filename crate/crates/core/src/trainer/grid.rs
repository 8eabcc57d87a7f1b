use serde::{Deserialize, Serialize};

use super::schedule::ScheduleSet;
use crate::error::{CignError, Result};
use crate::par;

/// Evenly spaced values `start, start + step, ..., stop` (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.stop >= self.start) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(CignError::Usage(format!("empty or invalid grid {self:?}")));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| self.start + i as f64 * self.step).collect())
    }
}

/// Schedule field a grid search varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    LambdaF,
    LambdaH,
    LambdaBalance,
    LambdaIg,
    BaseLr,
    Momentum,
}

impl GridAxis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "lambda_f" => GridAxis::LambdaF,
            "lambda_h" => GridAxis::LambdaH,
            "lambda_balance" => GridAxis::LambdaBalance,
            "lambda_ig" => GridAxis::LambdaIg,
            "base_lr" => GridAxis::BaseLr,
            "momentum" => GridAxis::Momentum,
            other => return Err(CignError::Config(format!("{other:?} is not a searchable schedule field"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            GridAxis::LambdaF => "lambda_f",
            GridAxis::LambdaH => "lambda_h",
            GridAxis::LambdaBalance => "lambda_balance",
            GridAxis::LambdaIg => "lambda_ig",
            GridAxis::BaseLr => "base_lr",
            GridAxis::Momentum => "momentum",
        }
    }

    pub fn apply(self, s: &ScheduleSet, v: f64) -> ScheduleSet {
        let mut s = s.clone();
        match self {
            GridAxis::LambdaF => s.lambda_f = v,
            GridAxis::LambdaH => s.lambda_h = v,
            GridAxis::LambdaBalance => s.lambda_balance = v,
            GridAxis::LambdaIg => s.lambda_ig = v,
            GridAxis::BaseLr => s.base_lr = v,
            GridAxis::Momentum => s.momentum = v,
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub value: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub axis: GridAxis,
    pub points: Vec<GridPoint>,
    /// Highest accuracy; the lowest value wins ties.
    pub best: GridPoint,
}

/// Runs `runner` once per value and picks the most accurate. Points run
/// concurrently when parallelism is enabled; results keep grid order.
pub fn grid_search<F>(base: &ScheduleSet, axis: GridAxis, values: &[f64], runner: F) -> Result<GridResult>
where
    F: Fn(&ScheduleSet, usize, f64) -> Result<f64> + Sync,
{
    if values.is_empty() {
        return Err(CignError::Usage(format!("empty grid for {}", axis.name())));
    }
    let outcomes = par::map_indices(values.len(), |i| runner(&axis.apply(base, values[i]), i, values[i]));
    let mut points = Vec::with_capacity(values.len());
    for (v, acc) in values.iter().zip(outcomes) {
        points.push(GridPoint { value: *v, accuracy: acc? });
    }
    let best = *points
        .iter()
        .fold(None::<&GridPoint>, |b, p| match b {
            Some(b) if b.accuracy >= p.accuracy => Some(b),
            _ => Some(p),
        })
        .expect("non-empty");
    Ok(GridResult { axis, points, best })
}

/// Searches axes one after another, fixing each axis at its best value before the next.
pub fn sequential_search<F>(
    base: &ScheduleSet,
    axes: &[(GridAxis, Vec<f64>)],
    runner: F,
) -> Result<(ScheduleSet, Vec<GridResult>)>
where
    F: Fn(&ScheduleSet, usize, f64) -> Result<f64> + Sync,
{
    let mut current = base.clone();
    let mut results = Vec::with_capacity(axes.len());
    for (axis, values) in axes {
        let r = grid_search(&current, *axis, values, &runner)?;
        current = axis.apply(&current, r.best.value);
        results.push(r);
    }
    Ok((current, results))
}
