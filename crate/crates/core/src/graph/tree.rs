use serde::{Deserialize, Serialize};

use crate::error::{CignError, Result};
use crate::substrate::LayerSpec;

/// Where a split node's router reads its input from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouterSource {
    /// Routers see the raw input sample and share nothing with the F stacks.
    Independent,
    /// Routers read an intermediate F output. `taps[depth]` indexes the F
    /// layer whose output is used; when absent, the last maxpool of the
    /// stack (or its final layer if it has no pooling).
    FedFromF {
        #[serde(default)]
        taps: Option<Vec<usize>>,
    },
}

/// Architecture of a CIGN. Every node at the same depth shares the same
/// layer layout but owns its own parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    /// Per-sample input shape, `C x H x W`.
    #[serde(default = "default_input")]
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Children per split node at each depth; empty for a plain network.
    pub branching: Vec<usize>,
    /// F stack of split nodes, one entry per depth.
    pub split_f: Vec<Vec<LayerSpec>>,
    /// H stack of split nodes, one entry per depth; a K-way head is appended.
    pub split_h: Vec<Vec<LayerSpec>>,
    /// F stack of every leaf; must end in a fully connected layer of width `classes`.
    pub leaf_f: Vec<LayerSpec>,
    pub router_source: RouterSource,
}

fn default_input() -> [usize; 3] {
    [1, 28, 28]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Split,
    Leaf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologyNode {
    pub id: usize,
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub kind: NodeKind,
}

/// Node layout in breadth-first order; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    nodes: Vec<TopologyNode>,
}

impl Topology {
    pub fn from_branching(branching: &[usize]) -> Self {
        let mut nodes = vec![TopologyNode {
            id: 0,
            depth: 0,
            parent: None,
            children: Vec::new(),
            kind: if branching.is_empty() { NodeKind::Leaf } else { NodeKind::Split },
        }];
        let mut frontier = vec![0];
        for (depth, &k) in branching.iter().enumerate() {
            let mut next = Vec::new();
            for &p in &frontier {
                for _ in 0..k {
                    let id = nodes.len();
                    let kind = if depth + 1 == branching.len() { NodeKind::Leaf } else { NodeKind::Split };
                    nodes.push(TopologyNode { id, depth: depth + 1, parent: Some(p), children: Vec::new(), kind });
                    nodes[p].children.push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }
        Topology { nodes }
    }

    pub fn nodes(&self) -> &[TopologyNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TopologyNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Leaf).map(|n| n.id)
    }

    pub fn splits(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Split).map(|n| n.id)
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }
}

impl TreeSpec {
    pub fn topology(&self) -> Topology {
        Topology::from_branching(&self.branching)
    }

    pub fn depth(&self) -> usize {
        self.branching.len()
    }

    pub fn is_plain(&self) -> bool {
        self.branching.is_empty()
    }

    /// Index into `split_f[depth]` whose output feeds the router, if routers are fed from F.
    pub fn tap_index(&self, depth: usize) -> Option<usize> {
        match &self.router_source {
            RouterSource::Independent => None,
            RouterSource::FedFromF { taps: Some(t) } => t.get(depth).copied(),
            RouterSource::FedFromF { taps: None } => {
                let stack = &self.split_f[depth];
                stack
                    .iter()
                    .rposition(|l| matches!(l, LayerSpec::Maxpool { .. }))
                    .or_else(|| stack.len().checked_sub(1))
            }
        }
    }

    /// Per-sample shapes after each layer of `stack` applied to `input`.
    pub fn stack_shapes(stack: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(stack.len());
        let mut cur = input.to_vec();
        for l in stack {
            cur = l.output_shape(&cur)?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Per-sample input shape seen by the F stack of nodes at `depth`.
    pub fn f_input_shape(&self, depth: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.to_vec();
        for d in 0..depth {
            shape = Self::stack_shapes(&self.split_f[d], &shape)?.pop().unwrap_or(shape);
        }
        Ok(shape)
    }

    /// Per-sample input shape seen by the router stack of split nodes at `depth`.
    pub fn h_input_shape(&self, depth: usize) -> Result<Vec<usize>> {
        match self.tap_index(depth) {
            None => Ok(self.input_shape.to_vec()),
            Some(t) => {
                let shapes = Self::stack_shapes(&self.split_f[depth], &self.f_input_shape(depth)?)?;
                Ok(shapes[t].clone())
            }
        }
    }

    pub fn head(&self, depth: usize) -> LayerSpec {
        LayerSpec::fc(self.branching[depth])
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CignError::Config(m));
        if self.input_shape.contains(&0) {
            return err(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        let depth = self.branching.len();
        if self.split_f.len() != depth || self.split_h.len() != depth {
            return err(format!(
                "branching has {depth} levels but split_f has {} and split_h has {}",
                self.split_f.len(),
                self.split_h.len()
            ));
        }
        if let Some(&k) = self.branching.iter().find(|&&k| k < 2) {
            return err(format!("every split needs at least 2 children, got {k}"));
        }
        if let RouterSource::FedFromF { taps: Some(t) } = &self.router_source {
            if t.len() != depth {
                return err(format!("router taps list has {} entries for {depth} levels", t.len()));
            }
            for (d, &i) in t.iter().enumerate() {
                if i >= self.split_f[d].len() {
                    return err(format!("router tap {i} out of range for depth {d}"));
                }
            }
        }
        for d in 0..depth {
            if self.split_f[d].is_empty() && matches!(self.router_source, RouterSource::FedFromF { .. }) {
                return err(format!("depth {d} has an empty F stack but routers are fed from F"));
            }
            let h_out = Self::stack_shapes(&self.split_h[d], &self.h_input_shape(d)?)?;
            self.head(d).output_shape(h_out.last().map(Vec::as_slice).unwrap_or(&self.h_input_shape(d)?))?;
        }
        let leaf_in = self.f_input_shape(depth)?;
        let leaf_out = Self::stack_shapes(&self.leaf_f, &leaf_in)?;
        match self.leaf_f.last() {
            Some(LayerSpec::FullyConnected { width }) if *width == self.classes => {}
            _ => return err(format!("leaf stack must end in fully_connected(width = {})", self.classes)),
        }
        debug_assert_eq!(leaf_out.last(), Some(&vec![self.classes]));
        Ok(())
    }
}
