use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::LabeledDataset;
use crate::error::{CignError, Result};
use crate::graph::Cign;
use crate::igmath::entropy_unchecked;
use crate::scalar::Scalar;

/// Classes below this share of a node's samples are left out of the text rendering.
pub const ELIDE_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeHistogram {
    pub node: usize,
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub counts: Vec<usize>,
}

impl NodeHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Entropy (nats) of the node's empirical label distribution; zero when empty.
    pub fn entropy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        let p: Vec<f64> = self.counts.iter().map(|&c| c as f64 / t as f64).collect();
        entropy_unchecked(&p)
    }
}

/// Eval-mode class counts at every node of a tree over a dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafHistogram {
    pub class_names: Vec<String>,
    pub nodes: Vec<NodeHistogram>,
}

impl LeafHistogram {
    pub fn build<T: Scalar>(
        model: &Cign<T>,
        data: &LabeledDataset,
        class_names: &[&str],
        batch: usize,
    ) -> Result<Self> {
        let classes = model.spec().classes;
        if class_names.len() != classes {
            return Err(CignError::shape("class names", classes, class_names.len()));
        }
        let topo = model.topology();
        let mut nodes: Vec<NodeHistogram> = topo
            .nodes()
            .iter()
            .map(|n| NodeHistogram {
                node: n.id,
                depth: n.depth,
                parent: n.parent,
                children: n.children.clone(),
                counts: vec![0; classes],
            })
            .collect();
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let (_, state) = model.predict(&data.images::<T>(chunk), 1.0)?;
            for (node, rows) in state.rows.iter().enumerate() {
                for &r in rows {
                    nodes[node].counts[data.label(chunk[r])] += 1;
                }
            }
        }
        let h = LeafHistogram { class_names: class_names.iter().map(|s| s.to_string()).collect(), nodes };
        h.check(data.len())?;
        Ok(h)
    }

    /// Root holds every sample and each split's children partition it.
    pub fn check(&self, dataset_len: usize) -> Result<()> {
        if self.nodes[0].total() != dataset_len {
            return Err(CignError::Invariant(format!("root holds {} of {dataset_len} samples", self.nodes[0].total())));
        }
        for n in &self.nodes {
            if n.children.is_empty() {
                continue;
            }
            for c in 0..self.class_names.len() {
                let sum: usize = n.children.iter().map(|&k| self.nodes[k].counts[c]).sum();
                if sum != n.counts[c] {
                    return Err(CignError::Invariant(format!(
                        "children of node {} hold {sum} samples of class {c}, the node holds {}",
                        n.node, n.counts[c]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn root_entropy(&self) -> f64 {
        self.nodes[0].entropy()
    }

    /// `sum_leaf P(leaf) H(y | leaf)`.
    pub fn expected_leaf_entropy(&self) -> f64 {
        let total = self.nodes[0].total() as f64;
        self.nodes.iter().filter(|n| n.children.is_empty()).map(|n| n.total() as f64 / total * n.entropy()).sum()
    }

    /// Root child holding the most samples of `class`.
    pub fn majority_root_branch(&self, class: usize) -> Option<usize> {
        let kids = &self.nodes[0].children;
        kids.iter().copied().max_by_key(|&k| (self.nodes[k].counts[class], std::cmp::Reverse(k)))
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "root label entropy {:.4} nats, expected leaf entropy {:.4} nats",
            self.root_entropy(),
            self.expected_leaf_entropy()
        );
        self.render_node(0, &mut s);
        s
    }

    fn render_node(&self, id: usize, s: &mut String) {
        let n = &self.nodes[id];
        let indent = "  ".repeat(n.depth);
        let kind = if n.children.is_empty() { "leaf" } else { "node" };
        let _ = writeln!(s, "{indent}{kind} {} n={} H={:.4}", n.node, n.total(), n.entropy());
        let total = n.total().max(1) as f64;
        let mut order: Vec<usize> = (0..n.counts.len()).collect();
        order.sort_by_key(|&c| (std::cmp::Reverse(n.counts[c]), c));
        let shown: Vec<String> = order
            .into_iter()
            .filter(|&c| n.counts[c] as f64 / total >= ELIDE_FRACTION)
            .map(|c| format!("{} {:.1}%", self.class_names[c], 100.0 * n.counts[c] as f64 / total))
            .collect();
        if !shown.is_empty() {
            let _ = writeln!(s, "{indent}  {}", shown.join(", "));
        }
        for &k in &n.children {
            self.render_node(k, s);
        }
    }

    /// Every count, elided or not.
    pub fn render_csv(&self) -> String {
        let mut s = String::from("node,depth,parent,class,count\n");
        for n in &self.nodes {
            let parent = n.parent.map(|p| p.to_string()).unwrap_or_default();
            for (c, &k) in n.counts.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", n.node, n.depth, parent, self.class_names[c], k);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_leaf() -> LeafHistogram {
        let node = |node, depth, parent, children: Vec<usize>, counts: Vec<usize>| NodeHistogram {
            node,
            depth,
            parent,
            children,
            counts,
        };
        LeafHistogram {
            class_names: vec!["a".into(), "b".into()],
            nodes: vec![
                node(0, 0, None, vec![1, 2], vec![100, 100]),
                node(1, 1, Some(0), vec![], vec![99, 0]),
                node(2, 1, Some(0), vec![], vec![1, 100]),
            ],
        }
    }

    #[test]
    fn entropies_and_majority() {
        let h = two_leaf();
        h.check(200).unwrap();
        assert!((h.root_entropy() - 2f64.ln()).abs() < 1e-12);
        let p: f64 = 1.0 / 101.0;
        let leaf2 = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        assert!((h.expected_leaf_entropy() - 101.0 / 200.0 * leaf2).abs() < 1e-12);
        assert_eq!(h.majority_root_branch(0), Some(1));
        assert_eq!(h.majority_root_branch(1), Some(2));
    }

    #[test]
    fn rare_classes_elided_from_text_only() {
        let h = two_leaf();
        let text = h.render_text();
        let leaf2 = text.lines().skip_while(|l| !l.contains("leaf 2")).nth(1).unwrap();
        assert_eq!(leaf2.trim(), "b 99.0%");
        assert!(h.render_csv().contains("2,1,0,a,1\n"));
    }

    #[test]
    fn broken_partition_detected() {
        let mut h = two_leaf();
        h.nodes[2].counts[0] = 2;
        assert!(matches!(h.check(200), Err(CignError::Invariant(_))));
    }
}
