//! Information-gain mathematics for split nodes.
//!
//! All entropies are in nats. Probabilities below [`PROB_FLOOR`] are clamped
//! before taking logarithms so exact zeros contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{CignError, Result};
use crate::scalar::Scalar;

pub const PROB_FLOOR: f64 = 1e-30;
/// Row-sum tolerance for probability rows and joints.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[inline]
fn plogp(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.max(PROB_FLOOR).ln()
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(CignError::Domain(format!("{what} is empty")));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(CignError::Domain(format!("{what} has invalid entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(CignError::Domain(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Shannon entropy `-sum p ln p` of a validated distribution.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, "distribution")?;
    Ok(entropy_unchecked(p))
}

pub fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&v| plogp(v)).sum::<f64>()
}

/// Row-wise `softmax(logits / tau)` with max subtraction, generic over precision.
pub fn softmax_tempered_rows<T: Scalar>(logits: &[T], k: usize, tau: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - m) / tau).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / z);
    }
    out
}

/// Per-sample probabilities over the `k` children of a split node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchDistribution {
    k: usize,
    probs: Vec<f64>,
}

impl BranchDistribution {
    pub fn new(k: usize, probs: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(CignError::Domain(format!("a split needs at least 2 branches, got {k}")));
        }
        if !probs.len().is_multiple_of(k) {
            return Err(CignError::shape("branch distribution", format!("multiple of {k}"), probs.len()));
        }
        for row in probs.chunks(k) {
            check_distribution(row, "branch probability row")?;
        }
        Ok(BranchDistribution { k, probs })
    }

    pub fn branches(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.k)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Tempered softmax over per-sample logit rows of width `k`.
pub fn tempered_softmax(logits: &[f64], k: usize, tau: f64) -> Result<BranchDistribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(CignError::Domain(format!("temperature must be positive, got {tau}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CignError::Domain("non-finite router logit".into()));
    }
    if k == 0 || !logits.len().is_multiple_of(k) {
        return Err(CignError::shape("tempered softmax", format!("rows of width {k}"), logits.len()));
    }
    BranchDistribution::new(k, softmax_tempered_rows(logits, k, tau))
}

/// Router hyperplanes `(w_k, b_k)` over router features of width `d`, plus temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterHead {
    /// `d x k`, column `k` is the hyperplane normal of branch `k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub temperature: f64,
}

impl RouterHead {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>, temperature: f64) -> Result<Self> {
        let k = bias.len();
        if k < 2 {
            return Err(CignError::Domain(format!("router head needs K >= 2, got {k}")));
        }
        if !weight.len().is_multiple_of(k) {
            return Err(CignError::shape("router head", format!("d x {k}"), weight.len()));
        }
        if !(temperature > 0.0) {
            return Err(CignError::Domain(format!("temperature must be positive, got {temperature}")));
        }
        Ok(RouterHead { weight, bias, temperature })
    }

    pub fn branches(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_width(&self) -> usize {
        self.weight.len() / self.bias.len()
    }

    /// Branch distribution for row-major router features `h` (`n x d`).
    pub fn distribution(&self, h: &[f64]) -> Result<BranchDistribution> {
        let (d, k) = (self.feature_width(), self.branches());
        if !h.len().is_multiple_of(d) {
            return Err(CignError::shape("router features", format!("rows of width {d}"), h.len()));
        }
        let mut logits = Vec::with_capacity(h.len() / d * k);
        for row in h.chunks(d) {
            for j in 0..k {
                logits
                    .push(self.bias[j] + row.iter().enumerate().map(|(i, &x)| x * self.weight[i * k + j]).sum::<f64>());
            }
        }
        tempered_softmax(&logits, k, self.temperature)
    }
}

/// Empirical joint `p(y = c, n = k)` at one split node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointEstimate {
    classes: usize,
    branches: usize,
    /// Row-major `classes x branches`.
    joint: Vec<f64>,
    class_marginal: Vec<f64>,
    branch_marginal: Vec<f64>,
    samples: usize,
}

impl JointEstimate {
    /// Builds an estimate from an explicit `classes x branches` matrix.
    pub fn from_matrix(classes: usize, branches: usize, joint: Vec<f64>, samples: usize) -> Result<Self> {
        if joint.len() != classes * branches {
            return Err(CignError::shape("joint", classes * branches, joint.len()));
        }
        check_distribution(&joint, "joint distribution")?;
        let class_marginal = (0..classes).map(|c| joint[c * branches..(c + 1) * branches].iter().sum()).collect();
        let branch_marginal = (0..branches).map(|k| (0..classes).map(|c| joint[c * branches + k]).sum()).collect();
        Ok(JointEstimate { classes, branches, joint, class_marginal, branch_marginal, samples })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn get(&self, c: usize, k: usize) -> f64 {
        self.joint[c * self.branches + k]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.joint
    }

    pub fn class_marginal(&self) -> &[f64] {
        &self.class_marginal
    }

    pub fn branch_marginal(&self) -> &[f64] {
        &self.branch_marginal
    }

    pub fn class_entropy(&self) -> f64 {
        entropy_unchecked(&self.class_marginal)
    }

    pub fn branch_entropy(&self) -> f64 {
        entropy_unchecked(&self.branch_marginal)
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy_unchecked(&self.joint)
    }
}

/// `p(c, k) = (1/N) sum_x [label(x) = c] p(n = k | x)` over the samples reaching the node.
pub fn estimate_joint(labels: &[usize], probs: &BranchDistribution, classes: usize) -> Result<JointEstimate> {
    let n = labels.len();
    if n == 0 {
        return Err(CignError::StarvedNode("no samples reached the split node".into()));
    }
    if probs.samples() != n {
        return Err(CignError::shape("estimate_joint", format!("{n} probability rows"), probs.samples()));
    }
    let k = probs.branches();
    let mut joint = vec![0.0; classes * k];
    for (&y, row) in labels.iter().zip(probs.rows()) {
        if y >= classes {
            return Err(CignError::Domain(format!("label {y} outside [0, {classes})")));
        }
        for (j, &p) in row.iter().enumerate() {
            joint[y * k + j] += p;
        }
    }
    let inv = 1.0 / n as f64;
    joint.iter_mut().for_each(|v| *v *= inv);
    JointEstimate::from_matrix(classes, k, joint, n)
}

/// `H[p(y)] - E_{p(n)} H[p(y | n)]`.
pub fn information_gain(j: &JointEstimate) -> f64 {
    let expected_conditional: f64 = (0..j.branches)
        .filter(|&k| j.branch_marginal[k] > 0.0)
        .map(|k| {
            let pk = j.branch_marginal[k];
            let conditional: Vec<f64> = (0..j.classes).map(|c| j.get(c, k) / pk).collect();
            pk * entropy_unchecked(&conditional)
        })
        .sum();
    j.class_entropy() - expected_conditional
}

/// `H[p(y)] + lambda_balance * H[p(n)] - H[p(y, n)]`.
///
/// Values of `lambda_balance` below 1 reward unbalanced splits; they are
/// accepted but logged.
pub fn balanced_information_gain(j: &JointEstimate, lambda_balance: f64) -> f64 {
    if lambda_balance < 1.0 {
        log::warn!("lambda_balance = {lambda_balance} < 1 favours unbalanced splits");
    }
    j.class_entropy() + lambda_balance * j.branch_entropy() - j.joint_entropy()
}

/// Value of the router objective `-lambda_ig * IG_balanced`.
pub fn ig_loss(j: &JointEstimate, lambda_ig: f64, lambda_balance: f64) -> f64 {
    -lambda_ig * balanced_information_gain(j, lambda_balance)
}

/// Balanced information gain of the minibatch joint and its gradient with
/// respect to every entry of the row-major `n x k` probability matrix.
///
/// The marginals are treated as sums of the joint, so the gradient is exact
/// for the empirical objective even off the probability simplex.
pub fn balanced_ig_with_grad(
    labels: &[usize],
    probs: &[f64],
    k: usize,
    classes: usize,
    lambda_balance: f64,
) -> (f64, Vec<f64>) {
    let n = labels.len();
    debug_assert_eq!(probs.len(), n * k);
    let inv = 1.0 / n as f64;
    let mut joint = vec![0.0; classes * k];
    for (&y, row) in labels.iter().zip(probs.chunks(k)) {
        for (j, &p) in row.iter().enumerate() {
            joint[y * k + j] += p * inv;
        }
    }
    let py: Vec<f64> = joint.chunks(k).map(|r| r.iter().sum()).collect();
    let pn: Vec<f64> = (0..k).map(|j| (0..classes).map(|c| joint[c * k + j]).sum()).collect();
    let value = entropy_unchecked(&py) + lambda_balance * entropy_unchecked(&pn) - entropy_unchecked(&joint);
    let dlog = |p: f64| p.max(PROB_FLOOR).ln() + 1.0;
    // d value / d joint[c][j]
    let mut djoint = vec![0.0; classes * k];
    for c in 0..classes {
        for j in 0..k {
            djoint[c * k + j] = -dlog(py[c]) - lambda_balance * dlog(pn[j]) + dlog(joint[c * k + j]);
        }
    }
    let mut grad = vec![0.0; n * k];
    for (x, &y) in labels.iter().enumerate() {
        for j in 0..k {
            grad[x * k + j] = djoint[y * k + j] * inv;
        }
    }
    (value, grad)
}
