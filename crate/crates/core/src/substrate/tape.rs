use rand::Rng;

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::layer::{LayerSpec, Mode};
use super::params::{ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::error::{CignError, Result};
use crate::igmath;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    MaxPool { input: Var, geom: PoolGeometry, argmax: Vec<u32> },
    Relu(Var),
    Linear { input: Var, weight: Var, bias: Var },
    Dropout { input: Var, scale: Vec<T> },
    Reshape(Var),
    GatherRows { input: Var, rows: Vec<usize> },
    TemperedSoftmax { input: Var, tau: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<T> },
    InfoGainLoss { probs: Var, labels: Vec<usize>, classes: usize, lambda_ig: f64, lambda_balance: f64 },
    Add(Vec<Var>),
    SumAll(Var),
    HalfSquaredNorm(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward pass for reverse-mode differentiation.
///
/// Operations append nodes in evaluation order, so reverse index order is a
/// valid topological order for the backward sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(CignError::NonFinite(op_name(&op).into()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, params: &ParameterSet<T>, id: ParamId) -> Result<Var> {
        self.push(params.get(id).value.clone(), Op::Param(id), true)
    }

    /// Applies one layer. `weights` must be present exactly for conv2d and fully_connected.
    pub fn layer<R: Rng>(
        &mut self,
        spec: &LayerSpec,
        input: Var,
        weights: Option<(Var, Var)>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let sample_shape = &shape[1..];
        match (spec, weights) {
            (LayerSpec::Conv2d { .. }, Some((w, b))) => {
                let geom = spec.conv_geometry(sample_shape)?;
                self.conv2d(input, w, b, geom)
            }
            (LayerSpec::FullyConnected { .. }, Some((w, b))) => {
                let x = if shape.len() == 2 { input } else { self.flatten(input)? };
                self.linear(x, w, b)
            }
            (LayerSpec::Maxpool { .. }, None) => {
                let geom = spec.pool_geometry(sample_shape)?;
                self.maxpool(input, geom)
            }
            (LayerSpec::Relu, None) => self.relu(input),
            (LayerSpec::Flatten, None) => self.flatten(input),
            (LayerSpec::Dropout { p }, None) => match mode {
                Mode::Eval => Ok(input),
                Mode::Train => self.dropout(input, *p, rng),
            },
            (spec, w) => Err(CignError::Usage(format!(
                "layer {} called with{} weights",
                spec.name(),
                if w.is_some() { "" } else { "out" }
            ))),
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let x = self.value(input);
        let n = x.rows();
        if x.row_len() != geom.in_len() {
            return Err(CignError::shape("conv2d input", geom.in_len(), x.row_len()));
        }
        let w = self.value(weight);
        if w.len() != geom.filters * geom.patch_len() || self.value(bias).len() != geom.filters {
            return Err(CignError::shape("conv2d weights", geom.filters * geom.patch_len(), w.len()));
        }
        let out = kernels::conv_forward(&geom, x.data(), w.data(), self.value(bias).data(), n);
        let value = Tensor::new(vec![n, geom.filters, geom.out_height, geom.out_width], out)?;
        let ng = self.grad_flag(&[input, weight, bias]);
        self.push(value, Op::Conv2d { input, weight, bias, geom }, ng)
    }

    pub fn maxpool(&mut self, input: Var, geom: PoolGeometry) -> Result<Var> {
        let x = self.value(input);
        let n = x.rows();
        if x.row_len() != geom.in_len() {
            return Err(CignError::shape("maxpool input", geom.in_len(), x.row_len()));
        }
        let (out, argmax) = kernels::maxpool_forward(&geom, x.data(), n);
        let value = Tensor::new(vec![n, geom.channels, geom.out_height, geom.out_width], out)?;
        let ng = self.grad_flag(&[input]);
        self.push(value, Op::MaxPool { input, geom, argmax }, ng)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.grad_flag(&[input]);
        self.push(value, Op::Relu(input), ng)
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, d) = (x.rows(), x.row_len());
        if w.shape().len() != 2 || w.shape()[0] != d {
            return Err(CignError::shape("fully_connected weight", format!("[{d}, _]"), format!("{:?}", w.shape())));
        }
        let o = w.shape()[1];
        if self.value(bias).len() != o {
            return Err(CignError::shape("fully_connected bias", o, self.value(bias).len()));
        }
        let out = kernels::linear_forward(x.data(), w.data(), self.value(bias).data(), n, d, o);
        let value = Tensor::new(vec![n, o], out)?;
        let ng = self.grad_flag(&[input, weight, bias]);
        self.push(value, Op::Linear { input, weight, bias }, ng)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(&mut self, input: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CignError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let x = self.value(input);
        let keep = T::of(1.0 / (1.0 - p));
        let scale: Vec<T> = (0..x.len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.grad_flag(&[input]);
        self.push(value, Op::Dropout { input, scale }, ng)
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let shape = vec![x.rows(), x.row_len()];
        let value = x.clone().reshape(shape)?;
        let ng = self.grad_flag(&[input]);
        self.push(value, Op::Reshape(input), ng)
    }

    /// Selects leading-dimension rows; the row list is a constant (no gradient
    /// flows into the selection itself).
    pub fn gather_rows(&mut self, input: Var, rows: Vec<usize>) -> Result<Var> {
        let x = self.value(input);
        if let Some(&r) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(CignError::shape("gather_rows", format!("row < {}", x.rows()), r));
        }
        let value = x.gather_rows(&rows);
        let ng = self.grad_flag(&[input]);
        self.push(value, Op::GatherRows { input, rows }, ng)
    }

    pub fn tempered_softmax(&mut self, input: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(CignError::Domain(format!("temperature must be positive, got {tau}")));
        }
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(CignError::shape("tempered_softmax", "n x k", format!("{:?}", x.shape())));
        }
        let tau = T::of(tau);
        let data = igmath::softmax_tempered_rows(x.data(), x.row_len(), tau);
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.grad_flag(&[input]);
        self.push(value, Op::TemperedSoftmax { input, tau }, ng)
    }

    /// `sum_r weights[r] * -log softmax(logits_r)[labels[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<T>) -> Result<Var> {
        let z = self.value(logits);
        let (n, c) = (z.rows(), z.row_len());
        if labels.len() != n || weights.len() != n {
            return Err(CignError::shape(
                "cross_entropy",
                n,
                format!("{} labels / {} weights", labels.len(), weights.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(CignError::Domain(format!("label {y} outside [0, {c})")));
        }
        let mut loss = T::zero();
        for ((row, &y), &w) in z.data().chunks(c).zip(&labels).zip(&weights) {
            loss += w * (log_sum_exp(row) - row[y]);
        }
        let ng = self.grad_flag(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels, weights }, ng)
    }

    /// `-lambda_ig * IG_balanced` of the minibatch joint built from `probs`.
    pub fn info_gain_loss(
        &mut self,
        probs: Var,
        labels: Vec<usize>,
        classes: usize,
        lambda_ig: f64,
        lambda_balance: f64,
    ) -> Result<Var> {
        let p = self.value(probs);
        let (n, k) = (p.rows(), p.row_len());
        if labels.len() != n {
            return Err(CignError::shape("info_gain_loss", n, labels.len()));
        }
        if n == 0 {
            return Err(CignError::StarvedNode("information gain over zero samples".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(CignError::Domain(format!("label {y} outside [0, {classes})")));
        }
        let pf: Vec<f64> = p.data().iter().map(|v| v.as_f64()).collect();
        let (ig, _) = igmath::balanced_ig_with_grad(&labels, &pf, k, classes, lambda_balance);
        let ng = self.grad_flag(&[probs]);
        self.push(
            Tensor::scalar(T::of(-lambda_ig * ig)),
            Op::InfoGainLoss { probs, labels, classes, lambda_ig, lambda_balance },
            ng,
        )
    }

    pub fn add(&mut self, terms: &[Var]) -> Result<Var> {
        let first = terms.first().ok_or_else(|| CignError::Usage("add of no terms".into()))?;
        let mut acc = self.value(*first).clone();
        for t in &terms[1..] {
            let v = self.value(*t);
            if v.shape() != acc.shape() {
                return Err(CignError::shape("add", format!("{:?}", acc.shape()), format!("{:?}", v.shape())));
            }
            acc.add_assign(v);
        }
        let ng = self.grad_flag(terms);
        self.push(acc, Op::Add(terms.to_vec()), ng)
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        let ng = self.grad_flag(&[input]);
        self.push(Tensor::scalar(s), Op::SumAll(input), ng)
    }

    pub fn half_squared_norm(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().map(|&v| v * v).sum::<T>() * T::of(0.5);
        let ng = self.grad_flag(&[input]);
        self.push(Tensor::scalar(s), Op::HalfSquaredNorm(input), ng)
    }

    /// Back-propagates from the scalar `loss`, overwriting every gradient slot
    /// in `params`. Parameters the loss does not reach end with zero gradient.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet<T>) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(CignError::Usage(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        params.zero_grads();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    params.accumulate_grad(*id, &Tensor::new(node.value.shape().to_vec(), g)?)?;
                }
                Op::Conv2d { input, weight, bias, geom } => {
                    let x = self.value(*input);
                    let want_dx = self.nodes[input.0].needs_grad;
                    let (dx, dw, db) =
                        kernels::conv_backward(geom, x.data(), self.value(*weight).data(), &g, x.rows(), want_dx);
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *input, dx);
                    }
                    self.accumulate(&mut grads, *weight, dw);
                    self.accumulate(&mut grads, *bias, db);
                }
                Op::MaxPool { input, geom, argmax } => {
                    let dx = kernels::maxpool_backward(geom, argmax, &g, self.value(*input).rows());
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Relu(input) => {
                    let dx = self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Linear { input, weight, bias } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (n, d, o) = (x.rows(), x.row_len(), w.shape()[1]);
                    let want_dx = self.nodes[input.0].needs_grad;
                    let (dx, dw, db) = kernels::linear_backward(x.data(), w.data(), &g, n, d, o, want_dx);
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *input, dx);
                    }
                    self.accumulate(&mut grads, *weight, dw);
                    self.accumulate(&mut grads, *bias, db);
                }
                Op::Dropout { input, scale } => {
                    let dx = g.iter().zip(scale).map(|(&g, &s)| g * s).collect();
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Reshape(input) => self.accumulate(&mut grads, *input, g),
                Op::GatherRows { input, rows } => {
                    let x = self.value(*input);
                    let w = x.row_len();
                    let mut dx = vec![T::zero(); x.len()];
                    for (j, &r) in rows.iter().enumerate() {
                        for (d, &s) in dx[r * w..(r + 1) * w].iter_mut().zip(&g[j * w..(j + 1) * w]) {
                            *d += s;
                        }
                    }
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::TemperedSoftmax { input, tau } => {
                    let k = node.value.row_len();
                    let mut dx = vec![T::zero(); g.len()];
                    for ((p, gr), d) in node.value.data().chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                        let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            d[j] = p[j] * (gr[j] - dot) / *tau;
                        }
                    }
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::CrossEntropy { logits, labels, weights } => {
                    let z = self.value(*logits);
                    let c = z.row_len();
                    let mut dx = vec![T::zero(); z.len()];
                    for (((row, d), &y), &w) in z.data().chunks(c).zip(dx.chunks_mut(c)).zip(labels).zip(weights) {
                        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let s: T = row.iter().map(|&v| (v - m).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - m).exp() / s;
                            let t = if j == y { T::one() } else { T::zero() };
                            d[j] = g[0] * w * (p - t);
                        }
                    }
                    self.accumulate(&mut grads, *logits, dx);
                }
                Op::InfoGainLoss { probs, labels, classes, lambda_ig, lambda_balance } => {
                    let p = self.value(*probs);
                    let pf: Vec<f64> = p.data().iter().map(|v| v.as_f64()).collect();
                    let (_, dig) = igmath::balanced_ig_with_grad(labels, &pf, p.row_len(), *classes, *lambda_balance);
                    let up = g[0].as_f64() * -lambda_ig;
                    self.accumulate(&mut grads, *probs, dig.iter().map(|&v| T::of(up * v)).collect());
                }
                Op::Add(terms) => {
                    for t in terms {
                        self.accumulate(&mut grads, *t, g.clone());
                    }
                }
                Op::SumAll(input) => {
                    let n = self.value(*input).len();
                    self.accumulate(&mut grads, *input, vec![g[0]; n]);
                }
                Op::HalfSquaredNorm(input) => {
                    let dx = self.value(*input).data().iter().map(|&v| v * g[0]).collect();
                    self.accumulate(&mut grads, *input, dx);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "parameter",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool { .. } => "maxpool",
        Op::Relu(_) => "relu",
        Op::Linear { .. } => "fully_connected",
        Op::Dropout { .. } => "dropout",
        Op::Reshape(_) => "flatten",
        Op::GatherRows { .. } => "gather_rows",
        Op::TemperedSoftmax { .. } => "tempered_softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::InfoGainLoss { .. } => "info_gain_loss",
        Op::Add(_) => "add",
        Op::SumAll(_) => "sum",
        Op::HalfSquaredNorm(_) => "half_squared_norm",
    }
}
