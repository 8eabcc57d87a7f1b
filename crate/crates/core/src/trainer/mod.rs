//! Schedules, the SGD training loop and hyper-parameter grid search.

mod grid;
mod run;
mod schedule;

pub use grid::{grid_search, sequential_search, GridAxis, GridPoint, GridResult, GridSpec};
pub use run::{evaluate, train, EpochRecord, Evaluation, RunRecord, StepRecord, TrainEvent, TrainOptions};
pub use schedule::{LrRule, Milestone, RhoPhase, ScheduleSet, TauSchedule};
