use std::time::Duration;

use cign_core::graph::{preset, Cign, ObjectiveWeights, RoutingPolicy};
use cign_core::par;
use cign_core::substrate::{sgd_step, DecayByTag, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 125;

fn batch(rng: &mut ChaCha8Rng) -> (Tensor<f32>, Vec<usize>) {
    let data = (0..BATCH * 784).map(|_| rng.gen::<f32>()).collect();
    let labels = (0..BATCH).map(|_| rng.gen_range(0..10)).collect();
    (Tensor::new(vec![BATCH, 1, 28, 28], data).unwrap(), labels)
}

fn step(c: &mut Criterion) {
    let weights = ObjectiveWeights { lambda_ig: 1.0, lambda_balance: 2.0 };
    let decay = DecayByTag { f: 5e-5, h: 9e-4 };
    let mut group = c.benchmark_group("train_step_batch125");
    for name in ["mnist-thin", "mnist-cign-fed", "mnist-baseline"] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = batch(&mut rng);
        let mut model: Cign<f32> = Cign::new(preset(name).unwrap().spec, &mut rng).unwrap();
        for (mode, on) in [("parallel", true), ("sequential", false)] {
            par::set_parallel(on);
            group.bench_function(BenchmarkId::new(name, mode), |b| {
                b.iter(|| {
                    let mut pass = model.forward(&x, RoutingPolicy::train(0.4), 1.0, &mut rng).unwrap();
                    let loss = pass.total_loss(&y, weights).unwrap();
                    pass.backward(loss.total, model.params_mut()).unwrap();
                    sgd_step(model.params_mut(), 1e-3, 0.9, decay).unwrap();
                })
            });
        }
        par::set_parallel(true);
    }
    group.finish();
}

fn eval(c: &mut Criterion) {
    let mut group = c.benchmark_group("eval_batch500");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..500 * 784).map(|_| rng.gen::<f32>()).collect();
    let x = Tensor::new(vec![500, 1, 28, 28], data).unwrap();
    let model: Cign<f32> = Cign::new(preset("mnist-cign-fed").unwrap().spec, &mut rng).unwrap();
    for (mode, on) in [("parallel", true), ("sequential", false)] {
        par::set_parallel(on);
        group.bench_function(mode, |b| b.iter(|| model.predict(&x, 1.0).unwrap()));
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().configure_from_args().warm_up_time(Duration::from_secs(1)).measurement_time(Duration::from_secs(5)).sample_size(10);
    targets = step, eval
}
criterion_main!(benches);
