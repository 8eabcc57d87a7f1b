use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::routing::{argmax, route_rows, RoutingPolicy, RoutingState};
use super::tree::{NodeKind, RouterSource, Topology, TreeSpec};
use crate::error::{CignError, Result};
use crate::igmath::{self, BranchDistribution, JointEstimate};
use crate::scalar::Scalar;
use crate::substrate::{LayerSpec, Mode, ParamId, ParamTag, ParameterSet, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.1;

#[derive(Clone, Debug)]
struct BoundLayer {
    spec: LayerSpec,
    params: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct NodeLayers {
    f: Vec<BoundLayer>,
    h: Vec<BoundLayer>,
    tap: Option<usize>,
}

/// A conditional information gain network with its parameters.
#[derive(Clone, Debug)]
pub struct Cign<T> {
    spec: TreeSpec,
    topo: Topology,
    nodes: Vec<NodeLayers>,
    params: ParameterSet<T>,
}

/// Weights of the router objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda_ig: f64,
    pub lambda_balance: f64,
}

#[derive(Clone, Debug)]
pub struct LeafLogits {
    pub node: usize,
    pub rows: Vec<usize>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct RouterOutput {
    pub node: usize,
    pub rows: Vec<usize>,
    pub probs: Var,
}

/// Information gain of one split node on the current minibatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeIg {
    pub node: usize,
    pub samples: usize,
    pub ig: f64,
    pub ig_balanced: f64,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub classification: f64,
    pub ig_loss: f64,
    pub nodes: Vec<NodeIg>,
}

/// Result of one forward pass: the recorded tape plus routing bookkeeping.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub state: RoutingState,
    pub leaves: Vec<LeafLogits>,
    pub routers: Vec<RouterOutput>,
    /// Split nodes that received no samples.
    pub starved: Vec<usize>,
    classes: usize,
}

fn bind_stack<T: Scalar, R: Rng>(
    params: &mut ParameterSet<T>,
    stack: &[LayerSpec],
    input: &[usize],
    prefix: &str,
    tag: ParamTag,
    rng: &mut R,
) -> Result<Vec<BoundLayer>> {
    let mut shape = input.to_vec();
    let mut out = Vec::with_capacity(stack.len());
    for (j, l) in stack.iter().enumerate() {
        l.validate()?;
        let ids = match l.param_shapes(&shape)? {
            Some((ws, bs)) => {
                let w = params.insert(
                    format!("{prefix}{j}.weight"),
                    tag,
                    true,
                    ParameterSet::init_truncated_normal(ws, INIT_STD, rng),
                )?;
                let b = params.insert(format!("{prefix}{j}.bias"), tag, false, Tensor::zeros(bs))?;
                Some((w, b))
            }
            None => None,
        };
        shape = l.output_shape(&shape)?;
        out.push(BoundLayer { spec: l.clone(), params: ids });
    }
    Ok(out)
}

impl<T: Scalar> Cign<T> {
    /// Builds the network with truncated-normal weights and zero biases.
    pub fn new<R: Rng>(spec: TreeSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let topo = spec.topology();
        let mut params = ParameterSet::new();
        let mut nodes = Vec::with_capacity(topo.len());
        for n in topo.nodes() {
            let d = n.depth;
            let (f_stack, h_stack) = match n.kind {
                NodeKind::Leaf => (spec.leaf_f.clone(), Vec::new()),
                NodeKind::Split => {
                    let mut h = spec.split_h[d].clone();
                    h.push(spec.head(d));
                    (spec.split_f[d].clone(), h)
                }
            };
            let f =
                bind_stack(&mut params, &f_stack, &spec.f_input_shape(d)?, &format!("n{}.f", n.id), ParamTag::F, rng)?;
            let (h, tap) = match n.kind {
                NodeKind::Leaf => (Vec::new(), None),
                NodeKind::Split => (
                    bind_stack(
                        &mut params,
                        &h_stack,
                        &spec.h_input_shape(d)?,
                        &format!("n{}.h", n.id),
                        ParamTag::H,
                        rng,
                    )?,
                    spec.tap_index(d),
                ),
            };
            nodes.push(NodeLayers { f, h, tap });
        }
        Ok(Cign { spec, topo, nodes, params })
    }

    /// Builds the network and copies values from `source`, matched by name and shape.
    pub fn from_values(spec: TreeSpec, source: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut seen = vec![false; model.params.len()];
        for (name, value) in source {
            let id =
                model.params.id(&name).ok_or_else(|| CignError::Checkpoint(format!("unexpected parameter {name}")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(CignError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, the tree expects {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CignError::Checkpoint(format!("missing parameter {}", model.params.get(ParamId(i)).name)));
        }
        Ok(model)
    }

    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// Parameters owned by `node` with the given tag.
    pub fn node_params(&self, node: usize, tag: ParamTag) -> Vec<ParamId> {
        let layers = match tag {
            ParamTag::F => &self.nodes[node].f,
            ParamTag::H => &self.nodes[node].h,
        };
        layers.iter().filter_map(|l| l.params).flat_map(|(w, b)| [w, b]).collect()
    }

    fn run_stack<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        layers: &[BoundLayer],
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let mut cur = input;
        let mut outs = Vec::with_capacity(layers.len());
        for l in layers {
            let w = match l.params {
                Some((w, b)) => Some((tape.param(&self.params, w)?, tape.param(&self.params, b)?)),
                None => None,
            };
            cur = tape.layer(&l.spec, cur, w, mode, rng)?;
            outs.push(cur);
        }
        Ok(outs)
    }

    /// Sparse forward pass. Each node computes only on the rows routed to it.
    pub fn forward<R: Rng>(
        &self,
        images: &Tensor<T>,
        policy: RoutingPolicy,
        tau: f64,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        let n = images.rows();
        if n == 0 || images.is_empty() {
            return Err(CignError::Usage("forward needs a non-empty batch".into()));
        }
        let [c, h, w] = self.spec.input_shape;
        if images.row_len() != c * h * w {
            return Err(CignError::shape("input sample", c * h * w, images.row_len()));
        }
        let mode = policy.mode;
        let mut tape = Tape::new();
        let x = tape.input(images.clone().reshape(vec![n, c, h, w])?)?;

        let count = self.topo.len();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); count];
        let mut inputs: Vec<Option<Var>> = vec![None; count];
        let mut branch: Vec<Option<BranchDistribution>> = vec![None; count];
        rows[0] = (0..n).collect();
        inputs[0] = Some(x);
        let mut leaves = Vec::new();
        let mut routers = Vec::new();
        let mut starved = Vec::new();

        for node in self.topo.nodes() {
            let id = node.id;
            let Some(input) = inputs[id] else {
                if node.kind == NodeKind::Split {
                    if mode == Mode::Train {
                        log::debug!("starved node {id}: no samples routed to it");
                    }
                    starved.push(id);
                }
                continue;
            };
            let layers = &self.nodes[id];
            let f_outs = self.run_stack(&mut tape, &layers.f, input, mode, rng)?;
            let f_out = f_outs.last().copied().unwrap_or(input);
            if node.kind == NodeKind::Leaf {
                leaves.push(LeafLogits { node: id, rows: rows[id].clone(), logits: f_out });
                continue;
            }
            let h_in = match self.spec.router_source {
                RouterSource::Independent if rows[id].len() == n => x,
                RouterSource::Independent => tape.gather_rows(x, rows[id].clone())?,
                RouterSource::FedFromF { .. } => {
                    let t = layers.tap.expect("fed routers have a tap");
                    f_outs[t]
                }
            };
            let h_outs = self.run_stack(&mut tape, &layers.h, h_in, mode, rng)?;
            let logits = *h_outs.last().expect("router stack ends in a head");
            let probs = tape.tempered_softmax(logits, tau)?;
            let k = node.children.len();
            let dist = BranchDistribution::new(k, tape.value(probs).data().iter().map(|v| v.as_f64()).collect())?;
            let local = route_rows(&dist, &policy)?;
            let parent_len = rows[id].len();
            for (&child, sel) in node.children.iter().zip(local) {
                if sel.is_empty() {
                    continue;
                }
                rows[child] = sel.iter().map(|&r| rows[id][r]).collect();
                inputs[child] = Some(if sel.len() == parent_len { f_out } else { tape.gather_rows(f_out, sel)? });
            }
            routers.push(RouterOutput { node: id, rows: rows[id].clone(), probs });
            branch[id] = Some(dist);
        }

        let state = RoutingState {
            batch: n,
            mode,
            rho: policy.rho,
            rows,
            children: self.topo.nodes().iter().map(|t| t.children.clone()).collect(),
            branch,
        };
        Ok(ForwardPass { tape, state, leaves, routers, starved, classes: self.spec.classes })
    }

    /// Eval-mode class predictions and routing for a batch.
    pub fn predict(&self, images: &Tensor<T>, tau: f64) -> Result<(Vec<usize>, RoutingState)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(images, RoutingPolicy::eval(), tau, &mut rng)?;
        let preds = pass.predictions()?;
        Ok((preds, pass.state))
    }

    /// Standalone plain network made of the F stacks on the root-to-`leaf` path,
    /// carrying copies of their parameters.
    pub fn path_network(&self, leaf: usize) -> Result<Cign<T>> {
        if leaf >= self.topo.len() || self.topo.node(leaf).kind != NodeKind::Leaf {
            return Err(CignError::Usage(format!("node {leaf} is not a leaf")));
        }
        let path = self.topo.path_to(leaf);
        let stack: Vec<LayerSpec> =
            path.iter().flat_map(|&id| self.nodes[id].f.iter().map(|l| l.spec.clone())).collect();
        let spec = TreeSpec {
            input_shape: self.spec.input_shape,
            classes: self.spec.classes,
            branching: Vec::new(),
            split_f: Vec::new(),
            split_h: Vec::new(),
            leaf_f: stack,
            router_source: RouterSource::Independent,
        };
        let mut net = Cign::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let src: Vec<(ParamId, ParamId)> =
            path.iter().flat_map(|&id| self.nodes[id].f.iter().filter_map(|l| l.params)).collect();
        let dst: Vec<(ParamId, ParamId)> = net.nodes[0].f.iter().filter_map(|l| l.params).collect();
        debug_assert_eq!(src.len(), dst.len());
        for ((sw, sb), (dw, db)) in src.into_iter().zip(dst) {
            net.params.get_mut(dw).value = self.params.get(sw).value.clone();
            net.params.get_mut(db).value = self.params.get(sb).value.clone();
        }
        Ok(net)
    }

    /// F parameters on the root-to-`leaf` path, in the order `path_network` lays them out.
    pub fn path_param_ids(&self, leaf: usize) -> Vec<ParamId> {
        self.topo
            .path_to(leaf)
            .into_iter()
            .flat_map(|id| self.nodes[id].f.iter().filter_map(|l| l.params).flat_map(|(w, b)| [w, b]))
            .collect()
    }
}

impl<T: Scalar> ForwardPass<T> {
    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.state.batch {
            return Err(CignError::shape("labels", self.state.batch, labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(CignError::Domain(format!("label {y} outside [0, {})", self.classes)));
        }
        Ok(())
    }

    /// Mean over samples of the average cross-entropy across the leaves each sample visits.
    pub fn classification_loss(&mut self, labels: &[usize]) -> Result<Var> {
        self.check_labels(labels)?;
        let visits = self.state.leaf_visits();
        if let Some(r) = visits.iter().position(|&v| v == 0) {
            return Err(CignError::Invariant(format!("sample {r} reached no leaf")));
        }
        let n = self.state.batch as f64;
        let mut terms = Vec::with_capacity(self.leaves.len());
        for leaf in &self.leaves {
            let ys = leaf.rows.iter().map(|&r| labels[r]).collect();
            let ws = leaf.rows.iter().map(|&r| T::of(1.0 / (n * visits[r] as f64))).collect();
            terms.push(self.tape.cross_entropy(leaf.logits, ys, ws)?);
        }
        self.tape.add(&terms)
    }

    /// Minibatch joint of every non-starved split node.
    pub fn joints(&self, labels: &[usize]) -> Result<Vec<(usize, JointEstimate)>> {
        self.check_labels(labels)?;
        self.routers
            .iter()
            .map(|r| {
                let ys: Vec<usize> = r.rows.iter().map(|&i| labels[i]).collect();
                let dist = self.state.branch[r.node].as_ref().expect("router has a distribution");
                Ok((r.node, igmath::estimate_joint(&ys, dist, self.classes)?))
            })
            .collect()
    }

    /// Classification loss plus `-lambda_ig * IG_balanced` per non-starved split node.
    pub fn total_loss(&mut self, labels: &[usize], weights: ObjectiveWeights) -> Result<LossBreakdown> {
        let cls = self.classification_loss(labels)?;
        let classification = self.tape.value(cls).data()[0].as_f64();
        let mut nodes = Vec::with_capacity(self.routers.len());
        for (node, j) in self.joints(labels)? {
            nodes.push(NodeIg {
                node,
                samples: j.samples(),
                ig: igmath::information_gain(&j),
                ig_balanced: igmath::balanced_information_gain(&j, weights.lambda_balance),
            });
        }
        let mut terms = vec![cls];
        let mut ig_loss = 0.0;
        if weights.lambda_ig != 0.0 {
            for r in self.routers.clone() {
                let ys = r.rows.iter().map(|&i| labels[i]).collect();
                let v =
                    self.tape.info_gain_loss(r.probs, ys, self.classes, weights.lambda_ig, weights.lambda_balance)?;
                ig_loss += self.tape.value(v).data()[0].as_f64();
                terms.push(v);
            }
        }
        let total = if terms.len() == 1 { cls } else { self.tape.add(&terms)? };
        Ok(LossBreakdown { total, classification, ig_loss, nodes })
    }

    /// Predicted class per sample from the leaf on its argmax path.
    pub fn predictions(&self) -> Result<Vec<usize>> {
        let mut by_node = vec![None; self.state.rows.len()];
        for l in &self.leaves {
            by_node[l.node] = Some(l);
        }
        (0..self.state.batch)
            .map(|s| {
                let leaf = self
                    .state
                    .argmax_leaf(s)
                    .ok_or_else(|| CignError::Invariant(format!("sample {s} has no argmax leaf")))?;
                let l = by_node[leaf].ok_or_else(|| CignError::Invariant(format!("leaf {leaf} produced no logits")))?;
                let pos = l.rows.binary_search(&s).expect("argmax leaf holds the sample");
                let row: Vec<f64> = self.tape.value(l.logits).row(pos).iter().map(|v| v.as_f64()).collect();
                Ok(argmax(&row))
            })
            .collect()
    }

    /// Logits row of `sample` at `leaf`, if the sample reached it.
    pub fn leaf_logits(&self, leaf: usize, sample: usize) -> Option<Vec<T>> {
        let l = self.leaves.iter().find(|l| l.node == leaf)?;
        let pos = l.rows.binary_search(&sample).ok()?;
        Some(self.tape.value(l.logits).row(pos).to_vec())
    }

    pub fn backward(&self, loss: Var, params: &mut ParameterSet<T>) -> Result<()> {
        self.tape.backward(loss, params)
    }
}
