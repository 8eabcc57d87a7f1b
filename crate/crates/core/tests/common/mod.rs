#![allow(dead_code)]

use cign_core::graph::{Cign, ObjectiveWeights, RouterSource, RoutingPolicy, TreeSpec};
use cign_core::substrate::{LayerSpec as L, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small [2,2] tree over 1x8x8 inputs with 3 classes.
pub fn tiny_tree(router_source: RouterSource, dropout: bool) -> TreeSpec {
    let mut leaf = vec![L::fc(6), L::Relu];
    if dropout {
        leaf.push(L::dropout(0.3));
    }
    leaf.push(L::fc(3));
    let h = match router_source {
        RouterSource::Independent => vec![L::conv(3, 1), L::Relu, L::pool(2, 2), L::Flatten, L::fc(4), L::Relu],
        RouterSource::FedFromF { .. } => vec![L::Flatten, L::fc(4), L::Relu],
    };
    TreeSpec {
        input_shape: [1, 8, 8],
        classes: 3,
        branching: vec![2, 2],
        split_f: vec![vec![L::conv(3, 2), L::Relu, L::pool(2, 2)], vec![L::conv(3, 3), L::Relu]],
        split_h: vec![h.clone(), h],
        leaf_f: leaf,
        router_source,
    }
}

pub fn random_batch<R: Rng>(n: usize, shape: [usize; 3], classes: usize, rng: &mut R) -> (Tensor<f64>, Vec<usize>) {
    let len = shape.iter().product::<usize>();
    let data: Vec<f64> = (0..n * len).map(|_| rng.gen::<f64>()).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).unwrap(), labels)
}

pub fn model(spec: TreeSpec, seed: u64) -> Cign<f64> {
    Cign::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Total loss with a fixed dropout stream, so repeated evaluations see identical masks.
pub fn loss_value(
    m: &Cign<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    policy: RoutingPolicy,
    tau: f64,
    w: ObjectiveWeights,
    seed: u64,
) -> f64 {
    let mut pass = m.forward(x, policy, tau, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let l = pass.total_loss(y, w).unwrap();
    pass.tape.value(l.total).data()[0]
}

pub fn analytic_grads(
    m: &mut Cign<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    policy: RoutingPolicy,
    tau: f64,
    w: ObjectiveWeights,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut pass = m.forward(x, policy, tau, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let l = pass.total_loss(y, w).unwrap();
    pass.backward(l.total, m.params_mut()).unwrap();
    m.params().iter().map(|(_, p)| p.grad.data().to_vec()).collect()
}

/// Central differences of `f` with respect to every parameter value.
pub fn numeric_grads(m: &mut Cign<f64>, step: f64, f: impl Fn(&Cign<f64>) -> f64) -> Vec<Vec<f64>> {
    let ids: Vec<_> = m.params().iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = m.params().get(id).value.len();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = m.params().get(id).value.data()[i];
            m.params_mut().get_mut(id).value.data_mut()[i] = orig + step;
            let up = f(m);
            m.params_mut().get_mut(id).value.data_mut()[i] = orig - step;
            let down = f(m);
            m.params_mut().get_mut(id).value.data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `|a - b| / max(|a|, |b|)` over a whole tensor; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn param_names<T: cign_core::Scalar>(p: &ParameterSet<T>) -> Vec<String> {
    p.iter().map(|(_, q)| q.name.clone()).collect()
}

/// Redraws every parameter (biases included) from `N(0, std^2)` so gradients are well above
/// finite-difference round-off.
pub fn randomize(m: &mut Cign<f64>, std: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for p in m.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
}
