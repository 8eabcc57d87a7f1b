use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::ScheduleSet;
use crate::dataio::{batches, LabeledDataset};
use crate::error::{CignError, Result};
use crate::graph::{Cign, NodeIg, ObjectiveWeights, RoutingPolicy};
use crate::scalar::Scalar;
use crate::substrate::{sgd_step, DecayByTag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub lr: f64,
    pub tau: f64,
    pub rho: f64,
    pub batch: usize,
    pub loss: f64,
    pub classification: f64,
    pub ig_loss: f64,
    pub nodes: Vec<NodeIg>,
    pub starved: Vec<usize>,
    /// Minibatch accuracy of the argmax-path predictions.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub iterations: u64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Everything observed during one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub schedule: ScheduleSet,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: Option<f64>,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
    Diverged { iteration: u64, epoch: u64, detail: String },
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Verify routing invariants after every forward pass.
    pub check_invariants: bool,
    /// Evaluate on the test split after every epoch instead of only at the end.
    pub eval_every_epoch: bool,
    /// Stop after this many iterations (smoke runs).
    pub max_iterations: Option<u64>,
    /// Batch size for evaluation passes.
    pub eval_batch: usize,
    /// Keep every step record in the returned `RunRecord`.
    pub keep_steps: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            check_invariants: false,
            eval_every_epoch: true,
            max_iterations: None,
            eval_batch: 500,
            keep_steps: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Eval-mode accuracy: each sample is classified by the single leaf its routing reaches.
pub fn evaluate<T: Scalar>(model: &Cign<T>, data: &LabeledDataset, batch: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(CignError::Usage("evaluation over an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (p, _) = model.predict(&data.images::<T>(chunk), 1.0)?;
        predictions.extend(p);
    }
    let correct = predictions.iter().enumerate().filter(|(i, &p)| p == data.label(*i)).count();
    Ok(Evaluation { correct, total: data.len(), accuracy: correct as f64 / data.len() as f64, predictions })
}

fn diverged(iteration: u64, err: CignError) -> CignError {
    match err {
        CignError::NonFinite(what) => CignError::Diverged { iteration, detail: format!("non-finite value in {what}") },
        other => other,
    }
}

/// Trains `model` in place. `observe` sees every step and epoch as it happens,
/// and a divergence event before the error is returned.
pub fn train<T: Scalar>(
    model: &mut Cign<T>,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    schedule: &ScheduleSet,
    seed: u64,
    opts: &TrainOptions,
    mut observe: impl FnMut(&TrainEvent) -> Result<()>,
) -> Result<RunRecord> {
    schedule.validate(model.spec())?;
    if train_set.is_empty() {
        return Err(CignError::Usage("training set is empty".into()));
    }
    let schedule = schedule.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let weights = ObjectiveWeights { lambda_ig: schedule.lambda_ig, lambda_balance: schedule.lambda_balance };
    let decay = DecayByTag { f: schedule.lambda_f, h: schedule.lambda_h };
    let mut record = RunRecord {
        seed,
        schedule: schedule.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        final_test_accuracy: None,
        iterations: 0,
    };
    let mut iteration = 0u64;
    'epochs: for epoch in 0..schedule.epochs {
        let rho = schedule.rho_at(epoch);
        let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0u64);
        for batch in batches(train_set.len(), schedule.batch_size, seed, epoch)? {
            if opts.max_iterations.is_some_and(|m| iteration >= m) {
                break 'epochs;
            }
            let lr = schedule.lr_at(iteration);
            let tau = schedule.tau_at(iteration);
            let labels = train_set.labels_at(&batch);
            let step = (|| {
                let mut pass =
                    model.forward(&train_set.images::<T>(&batch), RoutingPolicy::train(rho), tau, &mut rng)?;
                if opts.check_invariants {
                    pass.state.check()?;
                }
                let loss = pass.total_loss(&labels, weights)?;
                let total = pass.tape.value(loss.total).data()[0].as_f64();
                if !total.is_finite() {
                    return Err(CignError::NonFinite("total loss".into()));
                }
                pass.backward(loss.total, model.params_mut())?;
                let preds = pass.predictions()?;
                Ok((loss, total, preds, pass.starved))
            })();
            let (loss, total, preds, starved) = match step {
                Ok(v) => v,
                Err(e) => {
                    let e = diverged(iteration, e);
                    if let CignError::Diverged { detail, .. } = &e {
                        log::error!("diverged at iteration {iteration}: {detail}");
                        observe(&TrainEvent::Diverged { iteration, epoch, detail: detail.clone() })?;
                    }
                    return Err(e);
                }
            };
            sgd_step(model.params_mut(), lr, schedule.momentum, decay)?;
            if model.params().iter().any(|(_, p)| !p.value.all_finite()) {
                let detail = "non-finite parameter after update".to_string();
                observe(&TrainEvent::Diverged { iteration, epoch, detail: detail.clone() })?;
                return Err(CignError::Diverged { iteration, detail });
            }
            let hits = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            let rec = StepRecord {
                iteration,
                epoch,
                lr,
                tau,
                rho,
                batch: batch.len(),
                loss: total,
                classification: loss.classification,
                ig_loss: loss.ig_loss,
                nodes: loss.nodes,
                starved,
                accuracy: hits as f64 / batch.len() as f64,
            };
            observe(&TrainEvent::Step(rec.clone()))?;
            if opts.keep_steps {
                record.steps.push(rec);
            }
            loss_sum += total;
            correct += hits;
            seen += batch.len();
            steps += 1;
            iteration += 1;
        }
        let last = epoch + 1 == schedule.epochs;
        let test_accuracy = match test_set {
            Some(t) if opts.eval_every_epoch || last => Some(evaluate(model, t, opts.eval_batch)?.accuracy),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            iterations: iteration,
            mean_loss: loss_sum / steps.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} test acc {}",
            rec.mean_loss,
            rec.train_accuracy,
            test_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
        observe(&TrainEvent::Epoch(rec.clone()))?;
        record.epochs.push(rec);
    }
    record.iterations = iteration;
    record.final_test_accuracy = match (record.epochs.last().and_then(|e| e.test_accuracy), test_set) {
        (Some(a), _) if record.epochs.len() as u64 == schedule.epochs => Some(a),
        (_, Some(t)) => Some(evaluate(model, t, opts.eval_batch)?.accuracy),
        (_, None) => None,
    };
    Ok(record)
}
