//! Acceptance suite. Prints one line per criterion and exits non-zero on any failure.
//!
//! Criteria that need the real datasets read them from `$CIGN_DATA_ROOT/{mnist,fashion-mnist}`.
//! The multi-hour training runs additionally need `CIGN_ACCEPTANCE_FULL=1`.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use cign_core::dataio::{load_split, parse_idx, DatasetKind, LabeledDataset, Split, DATA_ROOT_ENV, SIDE};
use cign_core::graph::{count_params, preset, Cign, ObjectiveWeights, RouterSource, RoutingPolicy};
use cign_core::igmath::{balanced_ig_with_grad, balanced_information_gain, information_gain, JointEstimate};
use cign_core::report::LeafHistogram;
use cign_core::trainer::{evaluate, train, RhoPhase, ScheduleSet, TrainEvent, TrainOptions};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FULL_ENV: &str = "CIGN_ACCEPTANCE_FULL";

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Partial,
    NotRun,
}

impl Status {
    fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Partial => "PARTIAL",
            Status::NotRun => "NOT RUN",
        }
    }
}

struct Outcome {
    status: Status,
    detail: String,
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    Outcome { status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn not_run(detail: impl Into<String>) -> Outcome {
    Outcome { status: Status::NotRun, detail: detail.into() }
}

// ---------- independent oracles ----------

fn h(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

fn marginals(m: &[f64], classes: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let py = m.chunks(k).map(|r| r.iter().sum()).collect();
    let pn = (0..k).map(|b| (0..classes).map(|c| m[c * k + b]).sum()).collect();
    (py, pn)
}

fn random_joint(rng: &mut ChaCha8Rng) -> JointEstimate {
    let classes = rng.gen_range(2..=10);
    let k = rng.gen_range(2..=4);
    let sparse = rng.gen_bool(0.3);
    let mut m: Vec<f64> =
        (0..classes * k).map(|_| if sparse && rng.gen_bool(0.4) { 0.0 } else { rng.gen::<f64>() }).collect();
    if m.iter().all(|&v| v == 0.0) {
        m[0] = 1.0;
    }
    let s: f64 = m.iter().sum();
    m.iter_mut().for_each(|v| *v /= s);
    JointEstimate::from_matrix(classes, k, m, 1).unwrap()
}

// ---------- criteria ----------

fn math_identities() -> Outcome {
    const JOINTS: usize = 5000;
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = [0.0f64; 4];
    for _ in 0..JOINTS {
        let j = random_joint(&mut rng);
        let (c, k) = (j.classes(), j.branches());
        let m = j.matrix();
        let (py, pn) = marginals(m, c, k);
        let ig = information_gain(&j);
        worst[0] = worst[0].max((ig - (h(&py) + h(&pn) - h(m))).abs());
        let mut kl = 0.0;
        for a in 0..c {
            for b in 0..k {
                let p = m[a * k + b];
                if p > 0.0 {
                    kl += p * (p / (py[a] * pn[b])).ln();
                }
            }
        }
        worst[1] = worst[1].max((ig - kl).abs());
        let lambda = rng.gen_range(1.0..6.0);
        worst[2] = worst[2].max((balanced_information_gain(&j, lambda) - ig - (lambda - 1.0) * h(&pn)).abs());
        let low = (-ig).max(0.0);
        let high = (ig - h(&py).min(h(&pn))).max(0.0);
        worst[3] = worst[3].max(low.max(high));
    }
    let ok = worst.iter().all(|&w| w < TOL);
    pass_if(
        ok,
        format!(
            "{JOINTS} joints; max deviation decomposition {:.1e}, KL {:.1e}, balanced {:.1e}, bounds {:.1e} (tol {TOL:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn gradient_correctness() -> Outcome {
    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ad);
    let mut worst_ig = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..=16);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let probs: Vec<f64> = (0..n)
            .flat_map(|_| {
                let p = rng.gen_range(0.02..0.98);
                [p, 1.0 - p]
            })
            .collect();
        let lambda = [1.0, 2.0, 5.0][rng.gen_range(0..3)];
        let (_, g) = balanced_ig_with_grad(&labels, &probs, 2, 3, lambda);
        let numeric: Vec<f64> = (0..probs.len())
            .map(|i| {
                let mut up = probs.clone();
                let mut dn = probs.clone();
                up[i] += STEP;
                dn[i] -= STEP;
                let f = |p: &[f64]| -balanced_ig_with_grad(&labels, p, 2, 3, lambda).0;
                (f(&up) - f(&dn)) / (2.0 * STEP)
            })
            .collect();
        let analytic: Vec<f64> = g.iter().map(|v| -v).collect();
        worst_ig = worst_ig.max(relative_error(&analytic, &numeric));
    }

    let w = ObjectiveWeights { lambda_ig: 1.0, lambda_balance: 2.0 };
    let mut worst_tree = 0.0f64;
    let mut tensors = 0;
    let sources = [RouterSource::FedFromF { taps: None }, RouterSource::Independent];
    for (i, src) in sources.iter().cycle().take(4).enumerate() {
        let seed = 300 + i as u64;
        let mut m = model(tiny_tree(src.clone(), true), seed);
        randomize(&mut m, 0.5, seed);
        let (x, y) = random_batch(16, [1, 8, 8], 3, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let policy = RoutingPolicy::train(0.0);
        let a = analytic_grads(&mut m, &x, &y, policy, 2.0, w, seed);
        let n = numeric_grads(&mut m, STEP, |mm| loss_value(mm, &x, &y, policy, 2.0, w, seed));
        for (a, n) in a.iter().zip(&n) {
            worst_tree = worst_tree.max(relative_error(a, n));
            tensors += 1;
        }
    }
    pass_if(
        worst_ig < TOL && worst_tree < TOL,
        format!("balanced-IG loss 200 instances max rel err {worst_ig:.1e}; CIGN total loss {tensors} tensors max rel err {worst_tree:.1e} (tol {TOL:.0e})"),
    )
}

fn sparse_update_equivalence() -> Outcome {
    const TOL: f64 = 1e-6;
    let mut worst = 0.0f64;
    let mut cases = 0;
    let cases_spec = [
        (RouterSource::FedFromF { taps: None }, ObjectiveWeights { lambda_ig: 0.0, lambda_balance: 1.0 }),
        (RouterSource::Independent, ObjectiveWeights { lambda_ig: 1.0, lambda_balance: 2.0 }),
    ];
    for (ci, (src, w)) in cases_spec.iter().enumerate() {
        for s in 0..5u64 {
            let seed = 500 + 10 * ci as u64 + s;
            let mut m = model(tiny_tree(src.clone(), false), seed);
            randomize(&mut m, 0.3, seed);
            let (x, y) = random_batch(1, [1, 8, 8], 3, &mut ChaCha8Rng::seed_from_u64(seed + 1));
            let mut pass = m.forward(&x, RoutingPolicy::eval(), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let leaf = pass.state.argmax_leaf(0).unwrap();
            let loss = pass.total_loss(&y, *w).unwrap();
            pass.backward(loss.total, m.params_mut()).unwrap();

            let mut net = m.path_network(leaf).unwrap();
            let mut plain = net.forward(&x, RoutingPolicy::eval(), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let l = plain.classification_loss(&y).unwrap();
            plain.backward(l, net.params_mut()).unwrap();
            let src_ids = m.path_param_ids(leaf);
            let dst_ids: Vec<_> = net.params().iter().map(|(id, _)| id).collect();
            if src_ids.len() != dst_ids.len() {
                return pass_if(false, format!("path has {} tensors, network {}", src_ids.len(), dst_ids.len()));
            }
            for (a, b) in src_ids.into_iter().zip(dst_ids) {
                worst = worst.max(max_abs(m.params().get(a).grad.data(), net.params().get(b).grad.data()));
            }
            cases += 1;
        }
    }
    pass_if(
        worst < TOL,
        format!("{cases} single-sample paths; max-abs F gradient difference {worst:.1e} (tol {TOL:.0e})"),
    )
}

fn parameter_accounting() -> Outcome {
    let exact = [("mnist-baseline", 1_256_080usize)];
    let within = [
        ("mnist-thin", 26_695usize),
        ("fashion-baseline", 2_688_522),
        ("fashion-thin", 196_362),
        ("fashion-cign-independent", 643_016),
        ("fashion-cign-fed", 713_736),
    ];
    let informative = [("mnist-cign-independent", 99_856usize), ("mnist-cign-fed", 120_366)];
    let total = |name: &str| count_params(&preset(name).unwrap().spec).unwrap().total();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, want) in exact {
        let got = total(name);
        ok &= got == want;
        parts.push(format!("{name} {got} (= {want})"));
    }
    for (name, want) in within {
        let got = total(name);
        let dev = (got as f64 - want as f64) / want as f64;
        ok &= dev.abs() <= 0.05;
        parts.push(format!("{name} {got} ({:+.2}%)", dev * 100.0));
    }
    for (name, want) in informative {
        let got = total(name);
        parts.push(format!("{name} {got} ({:+.2}% vs {want})", (got as f64 - want as f64) / want as f64 * 100.0));
    }
    pass_if(ok, parts.join("; "))
}

/// Class-dependent strokes with noise, for runs that only need learnable 28x28 inputs.
fn synthetic_digits(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in pixels.chunks_mut(SIDE * SIDE).enumerate() {
        let c = i % 10;
        labels.push(c as u8);
        let shift: i32 = rng.gen_range(-2..=2);
        for (p, v) in img.iter_mut().enumerate() {
            let (r, col) = ((p / SIDE) as i32, (p % SIDE) as i32);
            let row_bar = (r - (4 + 2 * c as i32) - shift).abs() <= 1;
            let col_bar = c >= 5 && (col - (4 + 4 * (c as i32 - 5)) - shift).abs() <= 1;
            let base: u8 = if row_bar || col_bar { 200 } else { 0 };
            *v = base.saturating_add(rng.gen_range(0..40));
        }
    }
    LabeledDataset::from_raw(Split::Train, pixels, labels).unwrap()
}

fn data_dir(kind: DatasetKind) -> Option<PathBuf> {
    let root = std::env::var_os(DATA_ROOT_ENV)?;
    let dir = PathBuf::from(root).join(kind.dir_name());
    dir.is_dir().then_some(dir)
}

fn routing_invariants() -> Outcome {
    let (data, source) = match data_dir(DatasetKind::Mnist).map(|d| load_split(d, Split::Train)) {
        Some(Ok(d)) => (d.head(1000), "MNIST train[..1000]"),
        _ => (synthetic_digits(1000, 7), "synthetic 28x28 stand-in (MNIST not found)"),
    };
    let mut schedule = ScheduleSet::mnist();
    schedule.epochs = 2;
    schedule.rho = vec![RhoPhase { from_epoch: 0, value: 0.0 }, RhoPhase { from_epoch: 1, value: 0.4 }];
    let mut m: Cign<f32> =
        Cign::new(preset("mnist-cign-fed").unwrap().spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let opts = TrainOptions { check_invariants: true, ..TrainOptions::default() };
    let (mut dense_steps, mut sparse_steps) = (0, 0);
    let run = train(&mut m, &data, None, &schedule, 1, &opts, |e| {
        if let TrainEvent::Step(s) = e {
            if s.rho == 0.0 {
                dense_steps += 1;
            } else {
                sparse_steps += 1;
            }
        }
        Ok(())
    });
    if let Err(e) = run {
        return pass_if(false, format!("{source}: invariant violated or run failed: {e}"));
    }

    let idx: Vec<usize> = (0..125).collect();
    let x = data.images::<f32>(&idx);
    let dense = m.forward(&x, RoutingPolicy::train(0.0), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let all: Vec<usize> = idx.clone();
    let exactly_dense = dense.state.rows.iter().all(|r| *r == all);
    let (_, state) = m.predict(&x, 1.0).unwrap();
    let single_leaf = state.check().is_ok() && state.leaf_visits().iter().all(|&v| v == 1);
    pass_if(
        exactly_dense && single_leaf,
        format!(
            "{source}: {dense_steps} rho=0 steps + {sparse_steps} rho=0.4 steps with per-step partition/cover checks; \
             rho=0 dense {exactly_dense}; eval single-leaf {single_leaf}"
        ),
    )
}

fn full_runs_enabled() -> bool {
    std::env::var(FULL_ENV).is_ok_and(|v| v == "1")
}

fn load_both(kind: DatasetKind) -> Result<(LabeledDataset, LabeledDataset), String> {
    let dir = data_dir(kind).ok_or_else(|| format!("{} not found under ${DATA_ROOT_ENV}", kind.dir_name()))?;
    let tr = load_split(&dir, Split::Train).map_err(|e| e.to_string())?;
    let te = load_split(&dir, Split::Test).map_err(|e| e.to_string())?;
    Ok((tr, te))
}

fn full_run(
    name: &str,
    schedule: &ScheduleSet,
    seed: u64,
    tr: &LabeledDataset,
    te: &LabeledDataset,
) -> Result<(Cign<f32>, f64), String> {
    let mut m: Cign<f32> =
        Cign::new(preset(name).unwrap().spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    let opts = TrainOptions { eval_every_epoch: false, ..TrainOptions::default() };
    train(&mut m, tr, None, schedule, seed, &opts, |_| Ok(())).map_err(|e| format!("{name} seed {seed}: {e}"))?;
    let acc = evaluate(&m, te, 500).map_err(|e| e.to_string())?.accuracy * 100.0;
    eprintln!("  {name} seed {seed}: {acc:.2}%");
    Ok((m, acc))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mnist_end_to_end() -> Outcome {
    if !full_runs_enabled() {
        return not_run(format!("multi-hour runs; set {FULL_ENV}=1 and {DATA_ROOT_ENV}"));
    }
    let (tr, te) = match load_both(DatasetKind::Mnist) {
        Ok(v) => v,
        Err(e) => return not_run(e),
    };
    let acc = |name: &str, schedule: ScheduleSet| -> Result<Vec<f64>, String> {
        (1..=3).map(|s| full_run(name, &schedule, s, &tr, &te).map(|r| r.1)).collect()
    };
    let result = (|| {
        let base = acc("mnist-baseline", ScheduleSet::mnist_plain())?;
        let thin = acc("mnist-thin", ScheduleSet::mnist_plain())?;
        let cign = acc("mnist-cign-fed", ScheduleSet::mnist())?;
        Ok::<_, String>((base, thin, cign))
    })();
    match result {
        Err(e) => pass_if(false, e),
        Ok((base, thin, cign)) => pass_if(
            mean(&base) >= 99.0 && mean(&cign) >= 99.0 && mean(&cign) >= mean(&thin),
            format!(
                "3 seeds avg: baseline {:.2}% (>= 99.0), CIGN {:.2}% (>= 99.0), thin {:.2}% (CIGN >= thin)",
                mean(&base),
                mean(&cign),
                mean(&thin)
            ),
        ),
    }
}

fn fashion_end_to_end() -> (Outcome, Outcome) {
    if !full_runs_enabled() {
        let msg = format!("multi-hour run; set {FULL_ENV}=1 and {DATA_ROOT_ENV}");
        return (not_run(msg.clone()), not_run(format!("needs the trained Fashion CIGN; {msg}")));
    }
    let (tr, te) = match load_both(DatasetKind::Fashion) {
        Ok(v) => v,
        Err(e) => return (not_run(e.clone()), not_run(e)),
    };
    let (m, acc) = match full_run("fashion-cign-fed", &ScheduleSet::fashion(), 1, &tr, &te) {
        Ok(v) => v,
        Err(e) => return (pass_if(false, e.clone()), pass_if(false, e)),
    };
    let c7 = pass_if(acc >= 91.5, format!("fashion-cign-fed seed 1: {acc:.2}% (>= 91.5)"));
    let hist = match LeafHistogram::build(&m, &te, DatasetKind::Fashion.class_names(), 500) {
        Ok(h) => h,
        Err(e) => return (c7, pass_if(false, e.to_string())),
    };
    let (root, leaf) = (hist.root_entropy(), hist.expected_leaf_entropy());
    // Sandal, Sneaker, Bag, Ankle boot.
    let branches: Vec<Option<usize>> = [5, 7, 8, 9].iter().map(|&c| hist.majority_root_branch(c)).collect();
    let grouped = branches.iter().all(|b| b.is_some() && *b == branches[0]);
    let c8 = pass_if(
        leaf <= 0.5 * root && grouped,
        format!(
            "expected leaf entropy {leaf:.3} vs 0.5 x root {:.3}; footwear+bag root branches {branches:?}",
            0.5 * root
        ),
    );
    (c7, c8)
}

fn schedules() -> Outcome {
    let m = ScheduleSet::mnist();
    let f = ScheduleSet::fashion();
    let checks = [
        ("mnist lr(0)", m.lr_at(0), 0.025),
        ("mnist lr(15000)", m.lr_at(15_000), 0.0125),
        ("mnist lr(30000)", m.lr_at(30_000), 0.00625),
        ("fashion lr(40000)", f.lr_at(40_000), 0.01 * 0.5 * 0.5 * 0.1),
        ("tau(0)", m.tau_at(0), 25.0),
        ("tau(2)", m.tau_at(2), 25.0 * 0.9999),
        ("tau(inf)", m.tau_at(u64::MAX / 4), 1.0),
        ("rho(10)", m.rho_at(10), 0.0),
        ("rho(25)", m.rho_at(25), 0.4),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(name, got, want)| format!("{name} = {got}, want {want}"))
        .collect();
    let eval_ignores = RoutingPolicy::eval().validate(2).is_ok() && RoutingPolicy::train(0.6).validate(2).is_err();
    pass_if(
        bad.is_empty() && eval_ignores,
        if bad.is_empty() {
            format!("{} examples exact; rho > 1/K rejected, eval ignores rho", checks.len())
        } else {
            bad.join("; ")
        },
    )
}

fn decompressed(path: &Path) -> Vec<u8> {
    use std::io::Read;
    let raw = std::fs::read(path).unwrap();
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out).unwrap();
        out
    } else {
        raw
    }
}

fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}.gz"), stem.to_string()].into_iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

fn data_layer() -> Outcome {
    let synth = synthetic_digits(257, 3);
    let (img, lab) = synth.to_idx();
    let back = parse_idx(&img, &lab, Split::Train).unwrap();
    let (img2, lab2) = back.to_idx();
    let mut ok = img == img2 && lab == lab2;
    let mut parts = vec![format!("synthetic round trip byte-exact {ok}")];
    let mut status_partial = false;

    for kind in [DatasetKind::Mnist, DatasetKind::Fashion] {
        let Some(dir) = data_dir(kind) else { continue };
        for split in [Split::Train, Split::Test] {
            let stem = |what: &str| format!("{}-{what}", split.prefix());
            let (Some(ip), Some(lp)) = (find(&dir, &stem("images-idx3-ubyte")), find(&dir, &stem("labels-idx1-ubyte")))
            else {
                continue;
            };
            let (ib, lb) = (decompressed(&ip), decompressed(&lp));
            let same = match parse_idx(&ib, &lb, split) {
                Ok(d) => d.to_idx() == (ib, lb),
                Err(_) => false,
            };
            ok &= same;
            parts.push(format!("{} {} round trip {same}", kind.dir_name(), split.prefix()));
        }
    }

    match load_both(DatasetKind::Fashion) {
        Ok((tr, te)) => {
            let balanced = tr.class_counts().iter().all(|&c| c == 6000) && te.class_counts().iter().all(|&c| c == 1000);
            ok &= balanced;
            parts.push(format!("fashion counts 6000/1000 per class {balanced}"));
        }
        Err(e) => {
            status_partial = true;
            parts.push(format!("fashion class counts not checked: {e}"));
        }
    }
    let detail = parts.join("; ");
    match (ok, status_partial) {
        (false, _) => pass_if(false, detail),
        (true, true) => Outcome { status: Status::Partial, detail },
        (true, false) => pass_if(true, detail),
    }
}

fn main() {
    // Let `cargo test -- <filter>` and `--list` pass through harmlessly.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("[{:<7}] {id:>2} {name}: {} ({secs:.1}s)", o.status.label(), o.detail);
        results.push((id, name, o, secs));
    };
    run(1, "math identities", &math_identities);
    run(2, "gradient correctness", &gradient_correctness);
    run(3, "sparse-update equivalence", &sparse_update_equivalence);
    run(4, "parameter accounting", &parameter_accounting);
    run(5, "routing invariants", &routing_invariants);
    run(6, "MNIST end-to-end", &mnist_end_to_end);
    let fashion = std::cell::RefCell::new(None);
    run(7, "Fashion-MNIST end-to-end", &|| {
        let (a, b) = fashion_end_to_end();
        *fashion.borrow_mut() = Some(b);
        a
    });
    run(8, "routing purity", &|| fashion.borrow_mut().take().unwrap_or_else(|| not_run("criterion 7 did not run")));
    run(9, "schedules", &schedules);
    run(10, "data layer", &data_layer);

    let failed: Vec<u32> = results.iter().filter(|r| r.2.status == Status::Fail).map(|r| r.0).collect();
    let passed = results.iter().filter(|r| r.2.status == Status::Pass).count();
    println!("acceptance: {passed}/{} passed, failed {failed:?}", results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
