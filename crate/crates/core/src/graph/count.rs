use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::tree::{NodeKind, TreeSpec};
use crate::error::Result;

/// Parameter totals of one node, split by tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCount {
    pub node: usize,
    pub depth: usize,
    pub kind: NodeKind,
    pub f: usize,
    pub h: usize,
}

/// Parameters touched by one sample that follows the path to `leaf`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCount {
    pub leaf: usize,
    pub nodes: Vec<usize>,
    /// F parameters of the root-to-leaf expert.
    pub expert_f: usize,
    /// H parameters of the routers on the path.
    pub routers_h: usize,
}

impl PathCount {
    pub fn budget(&self) -> usize {
        self.expert_f + self.routers_h
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub nodes: Vec<NodeCount>,
    pub paths: Vec<PathCount>,
    pub total_f: usize,
    pub total_h: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.total_f + self.total_h
    }

    pub fn render_text(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<6} {:>5} {:<6} {:>12} {:>12}", "node", "depth", "kind", "W_F", "W_H");
        for n in &self.nodes {
            let kind = match n.kind {
                NodeKind::Split => "split",
                NodeKind::Leaf => "leaf",
            };
            let _ = writeln!(s, "{:<6} {:>5} {:<6} {:>12} {:>12}", n.node, n.depth, kind, n.f, n.h);
        }
        let _ = writeln!(s);
        let _ =
            writeln!(s, "{:<6} {:<14} {:>12} {:>12} {:>12}", "leaf", "path", "expert W_F", "routers W_H", "per sample");
        for p in &self.paths {
            let path = p.nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("-");
            let _ = writeln!(s, "{:<6} {:<14} {:>12} {:>12} {:>12}", p.leaf, path, p.expert_f, p.routers_h, p.budget());
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "total W_F {:>12}", self.total_f);
        let _ = writeln!(s, "total W_H {:>12}", self.total_h);
        let _ = writeln!(s, "total     {:>12}", self.total());
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("section,id,depth,kind,w_f,w_h,total\n");
        for n in &self.nodes {
            let kind = if n.kind == NodeKind::Split { "split" } else { "leaf" };
            let _ = writeln!(s, "node,{},{},{},{},{},{}", n.node, n.depth, kind, n.f, n.h, n.f + n.h);
        }
        for p in &self.paths {
            let _ =
                writeln!(s, "path,{},{},leaf,{},{},{}", p.leaf, p.nodes.len() - 1, p.expert_f, p.routers_h, p.budget());
        }
        let _ = writeln!(s, "total,,,,{},{},{}", self.total_f, self.total_h, self.total());
        s
    }
}

fn stack_count(stack: &[crate::substrate::LayerSpec], input: &[usize]) -> Result<usize> {
    let mut shape = input.to_vec();
    let mut total = 0;
    for l in stack {
        total += l.param_count(&shape)?;
        shape = l.output_shape(&shape)?;
    }
    Ok(total)
}

/// Counts parameters from the architecture alone, without allocating them.
pub fn count_params(spec: &TreeSpec) -> Result<ParamReport> {
    spec.validate()?;
    let topo = spec.topology();
    let mut nodes = Vec::with_capacity(topo.len());
    for n in topo.nodes() {
        let d = n.depth;
        let (f, h) = match n.kind {
            NodeKind::Leaf => (stack_count(&spec.leaf_f, &spec.f_input_shape(d)?)?, 0),
            NodeKind::Split => {
                let mut h_stack = spec.split_h[d].clone();
                h_stack.push(spec.head(d));
                (
                    stack_count(&spec.split_f[d], &spec.f_input_shape(d)?)?,
                    stack_count(&h_stack, &spec.h_input_shape(d)?)?,
                )
            }
        };
        nodes.push(NodeCount { node: n.id, depth: d, kind: n.kind, f, h });
    }
    let paths = topo
        .leaves()
        .map(|leaf| {
            let path = topo.path_to(leaf);
            PathCount {
                leaf,
                expert_f: path.iter().map(|&i| nodes[i].f).sum(),
                routers_h: path.iter().map(|&i| nodes[i].h).sum(),
                nodes: path,
            }
        })
        .collect();
    Ok(ParamReport { total_f: nodes.iter().map(|n| n.f).sum(), total_h: nodes.iter().map(|n| n.h).sum(), nodes, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::preset;

    #[test]
    fn totals_are_sums_of_nodes() {
        let r = count_params(&preset("mnist-cign-fed").unwrap().spec).unwrap();
        assert_eq!(r.total(), r.nodes.iter().map(|n| n.f + n.h).sum::<usize>());
        assert_eq!(r.paths.len(), 4);
        assert!(r.render_csv().starts_with("section,"));
    }

    #[test]
    fn cign_paths_match_thin_expert() {
        let thin = count_params(&preset("mnist-thin").unwrap().spec).unwrap().total();
        let r = count_params(&preset("mnist-cign-independent").unwrap().spec).unwrap();
        for p in &r.paths {
            assert_eq!(p.expert_f, thin);
        }
    }
}
