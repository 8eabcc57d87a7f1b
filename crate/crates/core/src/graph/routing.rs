use serde::{Deserialize, Serialize};

use crate::error::{CignError, Result};
use crate::igmath::BranchDistribution;
use crate::substrate::Mode;

/// Slack allowed when comparing a threshold with `1/K`.
const RHO_SLACK: f64 = 1e-12;

/// How samples are sent to children at split nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub mode: Mode,
    /// Train-mode threshold: a sample enters child `k` when `p(k|x) >= rho`.
    pub rho: f64,
}

impl RoutingPolicy {
    pub fn train(rho: f64) -> Self {
        RoutingPolicy { mode: Mode::Train, rho }
    }

    pub fn eval() -> Self {
        RoutingPolicy { mode: Mode::Eval, rho: 0.0 }
    }

    /// Checks the threshold against a split with `k` children. Eval policies ignore it.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.mode == Mode::Eval {
            return Ok(());
        }
        if !(self.rho >= 0.0) || self.rho > 1.0 / k as f64 + RHO_SLACK {
            return Err(CignError::Config(format!("threshold rho = {} outside [0, 1/{k}]", self.rho)));
        }
        Ok(())
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// One-hot indicator of the largest entry; ties go to the lowest index.
pub fn one_hot_psi(p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    if !p.is_empty() {
        out[argmax(p)] = 1.0;
    }
    out
}

/// Child assignment for every row of `probs`, as row positions per child.
pub fn route_rows(probs: &BranchDistribution, policy: &RoutingPolicy) -> Result<Vec<Vec<usize>>> {
    let k = probs.branches();
    policy.validate(k)?;
    let mut children = vec![Vec::new(); k];
    for (r, row) in probs.rows().enumerate() {
        let best = argmax(row);
        match policy.mode {
            Mode::Eval => children[best].push(r),
            Mode::Train => {
                for (c, &p) in row.iter().enumerate() {
                    if c == best || p >= policy.rho {
                        children[c].push(r);
                    }
                }
            }
        }
    }
    Ok(children)
}

/// Child masks over the full minibatch. `probs` holds one row per set entry of `mask`, in order.
pub fn route(mask: &[bool], probs: &BranchDistribution, policy: &RoutingPolicy) -> Result<Vec<Vec<bool>>> {
    let members: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if members.len() != probs.samples() {
        return Err(CignError::shape("route", members.len(), probs.samples()));
    }
    let local = route_rows(probs, policy)?;
    Ok(local
        .into_iter()
        .map(|rows| {
            let mut m = vec![false; mask.len()];
            for r in rows {
                m[members[r]] = true;
            }
            m
        })
        .collect())
}

/// Per-node membership of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingState {
    pub batch: usize,
    pub mode: Mode,
    pub rho: f64,
    /// Sorted minibatch rows reaching each node.
    pub rows: Vec<Vec<usize>>,
    pub children: Vec<Vec<usize>>,
    /// Branch probabilities of split nodes for their rows; `None` for leaves and starved splits.
    pub branch: Vec<Option<BranchDistribution>>,
}

impl RoutingState {
    pub fn mask(&self, node: usize) -> Vec<bool> {
        let mut m = vec![false; self.batch];
        for &r in &self.rows[node] {
            m[r] = true;
        }
        m
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.children[node].is_empty()
    }

    /// Number of leaves each sample reaches.
    pub fn leaf_visits(&self) -> Vec<usize> {
        let mut v = vec![0; self.batch];
        for (n, rows) in self.rows.iter().enumerate() {
            if self.is_leaf(n) {
                for &r in rows {
                    v[r] += 1;
                }
            }
        }
        v
    }

    /// Leaf reached by following the largest branch probability from the root.
    pub fn argmax_leaf(&self, sample: usize) -> Option<usize> {
        let mut node = 0;
        while !self.is_leaf(node) {
            let pos = self.rows[node].binary_search(&sample).ok()?;
            let probs = self.branch[node].as_ref()?;
            node = self.children[node][argmax(probs.row(pos))];
        }
        self.rows[node].binary_search(&sample).ok().map(|_| node)
    }

    /// Verifies mask partition (eval) or cover (train) at every split node.
    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(CignError::Invariant(m));
        if self.rows[0] != (0..self.batch).collect::<Vec<_>>() {
            return fail("root mask is not the full minibatch".into());
        }
        for (node, kids) in self.children.iter().enumerate() {
            if kids.is_empty() {
                continue;
            }
            let parent = &self.rows[node];
            let mut count = vec![0usize; self.batch];
            for &c in kids {
                for &r in &self.rows[c] {
                    if parent.binary_search(&r).is_err() {
                        return fail(format!("node {c} holds sample {r} absent from its parent {node}"));
                    }
                    count[r] += 1;
                }
            }
            for &r in parent {
                let n = count[r];
                let ok = match self.mode {
                    Mode::Eval => n == 1,
                    Mode::Train if self.rho == 0.0 => n == kids.len(),
                    Mode::Train => (1..=kids.len()).contains(&n),
                };
                if !ok {
                    return fail(format!(
                        "sample {r} reaches {n} of {} children of node {node} in {:?} mode",
                        kids.len(),
                        self.mode
                    ));
                }
            }
        }
        let visits = self.leaf_visits();
        if let Some(r) = visits.iter().position(|&v| v == 0) {
            return fail(format!("sample {r} reaches no leaf"));
        }
        if self.mode == Mode::Eval {
            if let Some(r) = visits.iter().position(|&v| v != 1) {
                return fail(format!("sample {r} reaches {} leaves in eval mode", visits[r]));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(rows: &[[f64; 2]]) -> BranchDistribution {
        BranchDistribution::new(2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn psi_examples() {
        assert_eq!(one_hot_psi(&[0.3, 0.7]), vec![0.0, 1.0]);
        assert_eq!(one_hot_psi(&[1.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot_psi(&[0.5, 0.5]), vec![1.0, 0.0]);
    }

    #[test]
    fn zero_threshold_sends_everyone_everywhere() {
        let p = dist(&[[0.99, 0.01], [0.2, 0.8]]);
        let r = route_rows(&p, &RoutingPolicy::train(0.0)).unwrap();
        assert_eq!(r, vec![vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn threshold_examples() {
        let p = dist(&[[0.45, 0.55], [0.3, 0.7]]);
        let r = route_rows(&p, &RoutingPolicy::train(0.4)).unwrap();
        assert_eq!(r, vec![vec![0], vec![0, 1]]);
    }

    #[test]
    fn eval_takes_argmax_only() {
        let p = dist(&[[0.51, 0.49]]);
        let r = route_rows(&p, &RoutingPolicy::eval()).unwrap();
        assert_eq!(r, vec![vec![0], vec![]]);
    }

    #[test]
    fn threshold_above_one_over_k_rejected() {
        let p = dist(&[[0.5, 0.5]]);
        assert!(matches!(route_rows(&p, &RoutingPolicy::train(0.51)), Err(CignError::Config(_))));
        assert!(route_rows(&p, &RoutingPolicy::train(0.5)).is_ok());
    }

    #[test]
    fn masks_map_back_to_batch_positions() {
        let p = dist(&[[0.9, 0.1], [0.2, 0.8]]);
        let m = route(&[false, true, false, true], &p, &RoutingPolicy::eval()).unwrap();
        assert_eq!(m, vec![vec![false, true, false, false], vec![false, false, false, true]]);
    }
}
