//! Acceptance suite. Runs all twelve criteria at their stated tolerances,
//! prints one PASS/FAIL line per criterion, and exits non-zero on any failure.
//!
//! The calibrated task and the frozen thresholds live in `acceptance.json`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use stackelgrad::bome::{bome_step, lambda_k, BilevelProblem, BomeConfig, BomeState, InnerOptimizer, ScalarBilevel};
use stackelgrad::game::PoisonGame;
use stackelgrad::gradcheck::{central_difference, relative_error};
use stackelgrad::lab::{
    ablation_diagnostic, accuracy_checks, adversarial_experiment, count_correct, evaluate_poison, poisoning_experiment,
    prepare, ratio_experiment,
};
use stackelgrad::losses::{
    accuracy_from_logits, adv_loss, attacker_payoff, ce_sur_bound_check, surrogate_loss, trades_loss, victim_loss,
    victim_rows, PgdConfig, TRADES_START,
};
use stackelgrad::nn::layer_shapes;
use stackelgrad::report::quartile_variances;
use stackelgrad::{
    Activation, Bindings, ExperimentSpec, Graph, LossKind, MlpClassifier, NodeId, ParamVector, PerturbationGenerator,
    Tensor,
};

#[derive(Deserialize)]
struct Thresholds {
    poisoned_accuracy_max: f64,
    ratio_fraction: f64,
    ratio_degradation_min: f64,
    grad_norm_ratio_min: f64,
    clip: f64,
    adv_small_radius: f64,
    adv_large_radius: f64,
    adv_degradation_min: f64,
}

#[derive(Deserialize)]
struct Acceptance {
    standard: ExperimentSpec,
    adversarial: ExperimentSpec,
    thresholds: Thresholds,
}

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values in `lo..hi` at least `gap` away from every point in `kinks`.
fn away_from(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = r.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() >= gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ----- 1: gradient oracle -----

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-8;

type Builder = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;
type Sample = (Vec<Tensor>, Box<Builder>);

/// `sum(weights * op(inputs))` and its gradient with respect to every input.
fn op_objective(inputs: &[Tensor], build: &Builder, weights: Option<&Tensor>) -> (f64, Vec<f64>, Vec<usize>) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = (0..inputs.len()).map(|i| g.param(format!("x{i}"))).collect();
    let out = build(&mut g, &ids);
    let root = match weights {
        Some(w) => {
            let c = g.constant(w.clone());
            let prod = g.mul(out, c);
            g.sum(prod)
        }
        None => g.sum(out),
    };
    let mut b = Bindings::new();
    for (id, t) in ids.iter().zip(inputs) {
        b.set(*id, t.clone());
    }
    let ev = g.forward(&b).unwrap();
    let out_shape = ev.value(out).shape().to_vec();
    let value = ev.value(root).item();
    let grads = ev.backward(root).unwrap();
    let flat = ids.iter().flat_map(|id| grads.of(*id).data().to_vec()).collect();
    (value, flat, out_shape)
}

fn check_op(name: &str, instances: usize, seed: u64, sample: &dyn Fn(&mut ChaCha8Rng) -> Sample) -> Result<f64, String> {
    let mut worst = 0.0_f64;
    for i in 0..instances {
        let mut r = rng(seed * 1000 + i as u64);
        let (inputs, build) = sample(&mut r);
        let (_, _, out_shape) = op_objective(&inputs, &*build, None);
        let weights = uniform(&mut r, &out_shape, -1.0, 1.0);
        let (_, analytic, _) = op_objective(&inputs, &*build, Some(&weights));
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let fd = central_difference(
            |x| {
                let mut off = 0;
                let ts: Vec<Tensor> = shapes
                    .iter()
                    .map(|s| {
                        let n: usize = s.iter().product();
                        let t = Tensor::new(s.clone(), x[off..off + n].to_vec()).unwrap();
                        off += n;
                        t
                    })
                    .collect();
                op_objective(&ts, &*build, Some(&weights)).0
            },
            &flat,
            FD_STEP,
        );
        let err = relative_error(&analytic, &fd, FD_FLOOR);
        if !(err < FD_TOL) {
            return Err(format!("{name} instance {i}: relative error {err:.3e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.gen_range(1..5), r.gen_range(2..6))
}

fn op_suite(instances: usize) -> Result<f64, String> {
    type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Sample>;
    let unary = |lo: f64, hi: f64, kinks: Vec<f64>, f: fn(&mut Graph, NodeId) -> NodeId| -> Sampler {
        Box::new(move |r| {
            let (m, n) = dims(r);
            (vec![away_from(r, &[m, n], lo, hi, &kinks, 0.05)], Box::new(move |g: &mut Graph, x: &[NodeId]| f(g, x[0])))
        })
    };
    let binary = |f: fn(&mut Graph, NodeId, NodeId) -> NodeId| -> Sampler {
        Box::new(move |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -2.0, 2.0);
            let b = uniform(r, &[m, n], -2.0, 2.0);
            (vec![a, b], Box::new(move |g: &mut Graph, x: &[NodeId]| f(g, x[0], x[1])))
        })
    };
    let ops: Vec<(&str, Sampler)> = vec![
        (
            "matmul",
            Box::new(|r| {
                let (m, k) = dims(r);
                let n = r.gen_range(1..5);
                let a = uniform(r, &[m, k], -2.0, 2.0);
                let b = uniform(r, &[k, n], -2.0, 2.0);
                (vec![a, b], Box::new(|g: &mut Graph, x: &[NodeId]| g.matmul(x[0], x[1])))
            }),
        ),
        ("add", binary(|g, a, b| g.add(a, b))),
        ("sub", binary(|g, a, b| g.sub(a, b))),
        ("mul", binary(|g, a, b| g.mul(a, b))),
        (
            "add_bias",
            Box::new(|r| {
                let (m, n) = dims(r);
                let a = uniform(r, &[m, n], -2.0, 2.0);
                let b = uniform(r, &[n], -2.0, 2.0);
                (vec![a, b], Box::new(|g: &mut Graph, x: &[NodeId]| g.add_bias(x[0], x[1])))
            }),
        ),
        ("scale", unary(-2.0, 2.0, vec![], |g, a| g.scale(a, -1.7))),
        ("neg", unary(-2.0, 2.0, vec![], |g, a| g.neg(a))),
        ("relu", unary(-2.0, 2.0, vec![0.0], |g, a| g.relu(a))),
        ("tanh", unary(-3.0, 3.0, vec![], |g, a| g.tanh(a))),
        ("exp", unary(-2.0, 2.0, vec![], |g, a| g.exp(a))),
        ("log", unary(0.2, 3.0, vec![], |g, a| g.log(a))),
        ("clamp", unary(-1.0, 1.0, vec![-0.5, 0.5], |g, a| g.clamp(a, -0.5, 0.5))),
        ("log_softmax", unary(-4.0, 4.0, vec![], |g, a| g.log_softmax(a))),
        ("sum", unary(-2.0, 2.0, vec![], |g, a| g.sum(a))),
        ("mean", unary(-2.0, 2.0, vec![], |g, a| g.mean(a))),
        (
            "gather",
            Box::new(|r| {
                let (m, n) = dims(r);
                let a = uniform(r, &[m, n], -2.0, 2.0);
                let idx: Vec<usize> = (0..m).map(|_| r.gen_range(0..n)).collect();
                (vec![a], Box::new(move |g: &mut Graph, x: &[NodeId]| g.gather(x[0], idx.clone())))
            }),
        ),
        (
            "maximum",
            Box::new(|r| {
                let m = r.gen_range(1..8);
                let a = uniform(r, &[m], -2.0, 2.0);
                let b = Tensor::vector(
                    a.data()
                        .iter()
                        .map(|&v| v + if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(0.05..1.0))
                        .collect(),
                );
                (vec![a, b], Box::new(|g: &mut Graph, x: &[NodeId]| g.maximum(x[0], x[1])))
            }),
        ),
        ("kl_div", binary(|g, a, b| g.kl_div(a, b))),
    ];
    let mut worst = 0.0_f64;
    for (k, (name, sampler)) in ops.iter().enumerate() {
        worst = worst.max(check_op(name, instances, k as u64 + 1, &**sampler)?);
    }
    // stop_gradient: identity forward, zero gradient by construction.
    let mut g = Graph::new();
    let x = g.param("x");
    let s = g.stop_gradient(x);
    let root = g.sum(s);
    let ev = g.forward(&Bindings::new().with(x, Tensor::vector(vec![1.0, -2.0]))).unwrap();
    ensure(ev.value(root).item() == -1.0, || "stop_gradient forward".into())?;
    ensure(ev.backward(root).unwrap().of(x).data() == [0.0, 0.0], || "stop_gradient backward".into())?;
    Ok(worst)
}

struct Instance {
    model: MlpClassifier,
    gen: PerturbationGenerator,
    x: Tensor,
    labels: Vec<usize>,
}

fn instance(seed: u64) -> Instance {
    let mut r = rng(10_000 + seed);
    let n = r.gen_range(2..6);
    let k = r.gen_range(2..5);
    let hidden = r.gen_range(2..7);
    let bottleneck = r.gen_range(1..4);
    let rows = r.gen_range(2..7);
    let model = MlpClassifier::new(vec![n, hidden, k], Activation::Tanh, &mut r).unwrap();
    let gen = PerturbationGenerator::new(vec![n, bottleneck], vec![bottleneck, n], Activation::Tanh, 0.3, &mut r).unwrap();
    let x = uniform(&mut r, &[rows, n], -1.5, 1.5);
    let labels = (0..rows).map(|_| r.gen_range(0..k)).collect();
    Instance { model, gen, x, labels }
}

fn with_flat_model(model: &MlpClassifier, flat: &[f64]) -> MlpClassifier {
    let p = ParamVector::unflatten(&layer_shapes(model.layer_dims()), flat).unwrap();
    MlpClassifier::with_params(model.layer_dims().to_vec(), model.activation(), p).unwrap()
}

fn with_flat_gen(gen: &PerturbationGenerator, flat: &[f64]) -> PerturbationGenerator {
    let p = ParamVector::unflatten(&layer_shapes(&gen.layer_dims()), flat).unwrap();
    PerturbationGenerator::with_params(gen.encoder_dims().to_vec(), gen.decoder_dims().to_vec(), gen.activation(), gen.budget(), p)
        .unwrap()
}

fn compare(what: &str, i: usize, analytic: &ParamVector, fd: &[f64]) -> Result<f64, String> {
    let err = relative_error(&analytic.flatten(), fd, FD_FLOOR);
    ensure(err < FD_TOL, || format!("{what} instance {i}: relative error {err:.3e}"))?;
    Ok(err)
}

/// Mean TRADES rows at a fixed inner-maximization offset.
fn trades_fixed(model: &MlpClassifier, x: &Tensor, labels: &[usize], offset: &Tensor) -> (f64, ParamVector) {
    let loss = LossKind::Trades { radius: 0.2, lambda: 0.5, pgd: PgdConfig::default() };
    let mut g = Graph::new();
    let xid = g.input("x");
    let ids = model.params().register(&mut g, "theta");
    let rows = victim_rows(&mut g, model, &ids, xid, labels, &loss, Some(offset)).unwrap();
    let root = g.mean(rows);
    let mut b = Bindings::new().with(xid, x.clone());
    model.params().bind(&mut b, &ids);
    let ev = g.forward(&b).unwrap();
    let grads = ev.backward(root).unwrap();
    (ev.value(root).item(), ParamVector::from_grads(&grads, &ids))
}

fn end_to_end_suite(instances: usize) -> Result<f64, String> {
    let mut worst = 0.0_f64;
    for i in 0..instances {
        let Instance { model, gen, x, labels } = instance(i as u64);
        let theta = model.params().flatten();
        let w = gen.params().flatten();

        // J_c with respect to theta and w.
        let p = victim_loss(&model, Some(&gen), None, &x, &labels, &LossKind::Ce, true).unwrap();
        let jc = |m: &MlpClassifier, g: &PerturbationGenerator| {
            victim_loss(m, Some(g), None, &x, &labels, &LossKind::Ce, false).unwrap().value
        };
        let fd = central_difference(|t| jc(&with_flat_model(&model, t), &gen), &theta, FD_STEP);
        worst = worst.max(compare("J_c/theta", i, &p.grad_theta, &fd)?);
        let fd = central_difference(|v| jc(&model, &with_flat_gen(&gen, v)), &w, FD_STEP);
        worst = worst.max(compare("J_c/w", i, p.grad_w.as_ref().unwrap(), &fd)?);

        // q_hat with theta_T held constant.
        let game = PoisonGame::new(model.clone(), gen.clone(), LossKind::Ce, LossKind::Sur, None).unwrap();
        let theta_t = model.params().scaled(0.8);
        let q = game.qhat(gen.params(), model.params(), &theta_t, &BatchOf(&x, &labels).into()).unwrap();
        let batch = BatchOf(&x, &labels).into();
        let h = |wv: &ParamVector, tv: &ParamVector| game.lower(wv, tv, &batch).unwrap().value;
        let w_pv = gen.params().clone();
        let fd = central_difference(
            |t| h(&w_pv, &with_flat_model(&model, t).params().clone()) - h(&w_pv, &theta_t),
            &theta,
            FD_STEP,
        );
        worst = worst.max(compare("q_hat/theta", i, &q.grad_theta, &fd)?);
        let fd = central_difference(
            |v| {
                let wv = with_flat_gen(&gen, v).params().clone();
                h(&wv, model.params()) - h(&wv, &theta_t)
            },
            &w,
            FD_STEP,
        );
        worst = worst.max(compare("q_hat/w", i, &q.grad_w, &fd)?);

        // J_a for each differentiable attacker loss.
        for loss in [LossKind::Sur, LossKind::Cw, LossKind::Ce] {
            let (_, grad) = attacker_payoff(&model, &x, &labels, &loss).unwrap();
            let fd = central_difference(|t| attacker_payoff(&with_flat_model(&model, t), &x, &labels, &loss).unwrap().0, &theta, FD_STEP);
            worst = worst.max(compare(&format!("J_a[{}]/theta", loss.name()), i, &grad, &fd)?);
        }

        // TRADES rows at a fixed offset.
        let mut r = rng(20_000 + i as u64);
        let offset = uniform(&mut r, x.shape(), -0.2, 0.2);
        let (_, grad) = trades_fixed(&model, &x, &labels, &offset);
        let fd = central_difference(|t| trades_fixed(&with_flat_model(&model, t), &x, &labels, &offset).0, &theta, FD_STEP);
        worst = worst.max(compare("trades/theta", i, &grad, &fd)?);
    }
    Ok(worst)
}

struct BatchOf<'a>(&'a Tensor, &'a [usize]);

impl From<BatchOf<'_>> for stackelgrad::game::GameBatch {
    fn from(b: BatchOf<'_>) -> Self {
        stackelgrad::game::GameBatch::same(b.0.clone(), b.1.to_vec())
    }
}

fn criterion_1() -> Check {
    let ops = op_suite(100)?;
    let e2e = end_to_end_suite(100)?;
    Ok(format!("18 ops x 100 instances, worst {ops:.2e}; J_c, q_hat, J_a, TRADES x 100 instances, worst {e2e:.2e}"))
}

// ----- 2, 3: surrogate bounds -----

fn random_logits(r: &mut ChaCha8Rng, k: usize) -> Tensor {
    let scale = [0.1, 1.0, 5.0, 20.0][r.gen_range(0..4)];
    uniform(r, &[k], -scale, scale)
}

fn criterion_2() -> Check {
    let mut worst_eq = 0.0_f64;
    for k in 2..=10 {
        let bound = -((k - 1) as f64).ln();
        let mut r = rng(200 + k as u64);
        for _ in 0..10_000 {
            let z = random_logits(&mut r, k);
            let y = r.gen_range(0..k);
            let s = surrogate_loss(&z, y).unwrap();
            ensure(s <= bound, || format!("K={k}: L_sur {s} exceeds {bound} at {z:?}"))?;
        }
        for _ in 0..100 {
            let c = r.gen_range(-5.0..5.0);
            let y = r.gen_range(0..k);
            let mut z = vec![c; k];
            z[y] = c - 1000.0;
            let s = surrogate_loss(&Tensor::vector(z), y).unwrap();
            worst_eq = worst_eq.max((s - bound).abs());
        }
    }
    ensure(worst_eq <= 1e-12, || format!("equality gap {worst_eq:e}"))?;
    Ok(format!("9 x 10^4 random inputs below the bound; equality gap {worst_eq:.1e}"))
}

fn criterion_3() -> Check {
    let mut worst_eq = 0.0_f64;
    let mut clamped = 0;
    let mut slack = f64::INFINITY;
    for k in 2..=10 {
        let mut r = rng(300 + k as u64);
        for _ in 0..10_000 {
            let z = random_logits(&mut r, k);
            let y = r.gen_range(0..k);
            let b = ce_sur_bound_check(&z, y).unwrap();
            if b.clamped {
                clamped += 1;
                continue;
            }
            ensure(b.lhs >= b.rhs - 1e-9, || format!("K={k}: CE {} below bound {} at {z:?}", b.lhs, b.rhs))?;
            slack = slack.min(b.lhs - b.rhs);
        }
        for _ in 0..100 {
            let y = r.gen_range(0..k);
            let mut z = vec![r.gen_range(-3.0..3.0); k];
            z[y] = r.gen_range(-6.0..6.0);
            let b = ce_sur_bound_check(&Tensor::vector(z), y).unwrap();
            worst_eq = worst_eq.max((b.lhs - b.rhs).abs());
        }
    }
    ensure(worst_eq <= 1e-9, || format!("equality gap {worst_eq:e}"))?;
    Ok(format!("9 x 10^4 random inputs ({clamped} outside the log domain), min slack {slack:.1e}; equality gap {worst_eq:.1e}"))
}

// ----- 4: lambda -----

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(vec![Tensor::vector(v)])
}

fn criterion_4() -> Check {
    let rho = 1.5;
    let cases = [
        (pv(vec![0.0, 3.0]), pv(vec![2.0, 0.0]), rho),
        (pv(vec![2.0, 0.0]), pv(vec![1.0, 0.0]), 0.0),
        (pv(vec![-1.0, 0.0]), pv(vec![1.0, 0.0]), 2.5),
        // opposed with |grad l| / |grad q| = 3: rho + 3
        (pv(vec![0.0, -6.0]), pv(vec![0.0, 2.0]), rho + 3.0),
    ];
    for (l, q, want) in &cases {
        let got = lambda_k(l, q, rho).lambda;
        ensure((got - want).abs() <= 1e-12, || format!("lambda {got}, expected {want}"))?;
    }
    let mut r = rng(4);
    let mut degenerate = 0;
    for _ in 0..100_000 {
        let n = r.gen_range(1..20);
        let scale_q = 10f64.powf(r.gen_range(-14.0..3.0));
        let l = pv((0..n).map(|_| r.gen_range(-10.0..10.0)).collect());
        let q = pv((0..n).map(|_| scale_q * r.gen_range(-1.0..1.0)).collect());
        let out = lambda_k(&l, &q, r.gen_range(0.1..5.0));
        ensure(out.lambda >= 0.0 && out.lambda.is_finite(), || format!("lambda {} for {l:?} {q:?}", out.lambda))?;
        degenerate += out.degenerate as usize;
    }
    Ok(format!("4 closed forms exact to 1e-12; 10^5 random pairs non-negative ({degenerate} degenerate)"))
}

// ----- 5: analytic bilevel problem -----

fn criterion_5() -> Check {
    let start = Instant::now();
    let p = ScalarBilevel { target: 1.0 };
    let cfg = BomeConfig {
        inner_steps: 10,
        inner_step_size: 0.1,
        inner_optimizer: InnerOptimizer::Gd,
        theta_step: 0.01,
        w_step: 0.01,
        rho: 1.5,
        grad_clip: None,
    };
    let mut s = BomeState { w: ScalarBilevel::point(-1.0), theta: ScalarBilevel::point(2.0) };
    let err = |s: &BomeState| (ScalarBilevel::value(&s.theta) - 1.0).abs() + (ScalarBilevel::value(&s.w) - 1.0).abs();
    let mut hit = None;
    let mut min_q = f64::INFINITY;
    for k in 0..5000 {
        let (next, t) = bome_step(&p, &s, &(), &cfg, k).map_err(|e| e.to_string())?;
        min_q = min_q.min(t.qhat);
        s = next;
        if hit.is_none() && err(&s) < 1e-3 {
            hit = Some(k + 1);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let steps = hit.ok_or_else(|| format!("not within 1e-3 after 5000 steps (error {:.3e})", err(&s)))?;
    ensure(err(&s) < 1e-3, || format!("left the 1e-3 ball, final error {:.3e}", err(&s)))?;
    ensure(min_q >= -1e-9, || format!("q_hat dipped to {min_q:e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("within 1e-3 after {steps} steps, final error {:.1e}, min q_hat {min_q:.1e}", err(&s)))
}

// ----- 6: degeneracies -----

fn criterion_6(cfg: &Acceptance) -> Check {
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let Instance { model, x, labels, .. } = instance(600 + i);
        let ce = victim_loss(&model, None, None, &x, &labels, &LossKind::Ce, false).unwrap().value;
        let adv = adv_loss(&model, &x, &labels, 0.0, &PgdConfig::default()).unwrap();
        let pgd = PgdConfig { start: TRADES_START, ..PgdConfig::default() };
        let tr = trades_loss(&model, &x, &labels, 0.0, 0.7, &pgd).unwrap();
        worst = worst.max((adv - ce).abs()).max((tr - ce).abs());
    }
    ensure(worst <= 1e-12, || format!("zero-radius gap {worst:e}"))?;

    let spec = &cfg.standard;
    let data = prepare(spec).map_err(|e| e.to_string())?;
    let (enc, dec) = spec.game.generator_dims(data.dim());
    let zero = PerturbationGenerator::zeros(enc, dec, spec.game.activation, spec.game.budget).unwrap();
    let seeds = [spec.seeds[0]];
    let with = evaluate_poison(Some(&zero), &data, &spec.victim, &LossKind::Ce, &seeds, None).map_err(|e| e.to_string())?;
    let without = evaluate_poison(None, &data, &spec.victim, &LossKind::Ce, &seeds, None).map_err(|e| e.to_string())?;
    ensure(with == without, || "zero generator changed the evaluation".into())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&with.poisoned) == bits(&with.clean), || "poisoned and clean differ".into())?;

    let mut r = rng(66);
    for _ in 0..10_000 {
        let rows = r.gen_range(1..20);
        let k = r.gen_range(2..6);
        // Small integers make ties frequent.
        let logits = Tensor::new(vec![rows, k], (0..rows * k).map(|_| r.gen_range(0..3) as f64).collect()).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..k)).collect();
        let acc = accuracy_from_logits(&logits, &labels).unwrap();
        let counted = count_correct(&logits, &labels) as f64 / rows as f64;
        ensure(acc == counted, || format!("-mean L_acc {acc} vs counter {counted}"))?;
    }
    Ok(format!(
        "zero-radius ADV/TRADES gap {worst:.1e}; zero generator bit-identical; accuracy identity on 10^4 tied batches and {} suite evaluations so far",
        accuracy_checks()
    ))
}

// ----- 7-12 -----

struct Audit(Vec<(String, f64, f64)>);

impl Audit {
    fn record(&mut self, what: impl Into<String>, max: f64, budget: f64) {
        self.0.push((what.into(), max, budget));
    }
}

fn criterion_7(cfg: &Acceptance, audit: &mut Audit) -> Check {
    let start = Instant::now();
    let spec = &cfg.standard;
    let data = prepare(spec).map_err(|e| e.to_string())?;
    let out = poisoning_experiment(spec, &data).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    for run in &out.runs {
        audit.record(format!("poisoning seed {}", run.seed), run.max_perturbation, spec.game.budget);
    }
    let e = &out.eval;
    let peaks: Vec<f64> = e.poisoned_curves.iter().map(|c| c.iter().cloned().fold(0.0, f64::max) / c.last().unwrap()).collect();
    ensure(e.clean_mean >= spec.clean_floor, || format!("clean {:.4} below floor", e.clean_mean))?;
    ensure(e.poisoned_mean <= cfg.thresholds.poisoned_accuracy_max, || {
        format!("poisoned {:.4} +- {:.4} above {}", e.poisoned_mean, e.poisoned_sd, cfg.thresholds.poisoned_accuracy_max)
    })?;
    ensure(secs < 900.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "clean {:.4} +- {:.4}, poisoned {:.4} +- {:.4} (<= {}); curve peak/final {:?}; {secs:.0}s",
        e.clean_mean, e.clean_sd, e.poisoned_mean, e.poisoned_sd, cfg.thresholds.poisoned_accuracy_max, round2(&peaks)
    ))
}

fn round2(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 100.0).round() / 100.0).collect()
}

fn criterion_8(cfg: &Acceptance, audit: &mut Audit) -> Check {
    let spec = &cfg.standard;
    let data = prepare(spec).map_err(|e| e.to_string())?;
    let table = ratio_experiment(spec, &data).map_err(|e| e.to_string())?;
    for row in &table {
        audit.record(format!("ratio p={}", row.fraction), row.max_perturbation, spec.game.budget);
    }
    let p = cfg.thresholds.ratio_fraction;
    let row = table.iter().find(|r| r.fraction == p).ok_or_else(|| format!("no row for p={p}"))?;
    let trend: Vec<String> = table.iter().map(|r| format!("{}:{:.3}", r.fraction, r.poisoned_mean)).collect();
    ensure(row.degradation >= cfg.thresholds.ratio_degradation_min, || {
        format!("p={p}: degradation {:.4} < {}", row.degradation, cfg.thresholds.ratio_degradation_min)
    })?;
    Ok(format!(
        "p={p}: clean {:.4}, poisoned {:.4}, degradation {:.4} (>= {}); table {}",
        row.clean_mean,
        row.poisoned_mean,
        row.degradation,
        cfg.thresholds.ratio_degradation_min,
        trend.join(" ")
    ))
}

fn criterion_9(cfg: &Acceptance) -> Check {
    let spec = &cfg.standard;
    let data = prepare(spec).map_err(|e| e.to_string())?;
    let t = ablation_diagnostic(&data, &spec.game).map_err(|e| e.to_string())?;
    let ce_max = t.ce.max_grad_ja_norm_raw();
    let sur_max = t.sur.max_grad_ja_norm_raw();
    let ratio = ce_max / sur_max;
    let (q1, q4) = quartile_variances(&t.sur.j_c_series());
    let clip = cfg.thresholds.clip;
    let clip_max = t.ce_clip.max_grad_ja_norm();
    let clipped: Vec<f64> = t.ce_clip.traces.iter().filter(|s| s.grad_ja_norm_raw > clip).map(|s| s.grad_ja_norm).collect();
    ensure(ratio >= cfg.thresholds.grad_norm_ratio_min, || format!("CE/SUR max grad norm ratio {ratio:.2}"))?;
    ensure(q4 < q1, || format!("SUR J_c variance: first quartile {q1:.3e}, last {q4:.3e}"))?;
    ensure(clip_max <= clip, || format!("clipped norm reached {clip_max}"))?;
    ensure(!clipped.is_empty(), || "the cap never engaged".into())?;
    let worst = clipped.iter().map(|v| clip - v).fold(0.0, f64::max);
    ensure(worst <= 1e-12 * clip, || format!("clipped step fell short of the cap by {worst:e}"))?;
    Ok(format!(
        "max grad norm CE {ce_max:.3e} vs SUR {sur_max:.3e} (x{ratio:.0}); SUR J_c variance {q1:.2e} -> {q4:.2e}; \
         clip engaged on {} steps, max {clip_max}",
        clipped.len()
    ))
}

fn criterion_10(audit: &Audit) -> Check {
    ensure(!audit.0.is_empty(), || "nothing audited".into())?;
    for (what, max, budget) in &audit.0 {
        ensure(max <= budget, || format!("{what}: max |x'-x| {max:e} exceeds {budget:e}"))?;
    }
    let tightest = audit.0.iter().map(|(_, m, b)| b - m).fold(f64::INFINITY, f64::min);
    Ok(format!("{} poisoned datasets within budget, smallest margin {tightest:.2e}", audit.0.len()))
}

fn criterion_12(cfg: &Acceptance, audit: &mut Audit) -> Check {
    let spec = &cfg.adversarial;
    let data = prepare(spec).map_err(|e| e.to_string())?;
    let grid = adversarial_experiment(spec, &data).map_err(|e| e.to_string())?;
    for c in &grid {
        audit.record(format!("adversarial game {}", c.game_radius), c.max_perturbation, spec.game.budget);
    }
    let cell = |g: f64, v: f64| grid.iter().find(|c| c.game_radius == g && c.victim_radius == v).cloned();
    let small = cfg.thresholds.adv_small_radius;
    let large = cfg.thresholds.adv_large_radius;
    let c = cell(small, small).ok_or("missing small-radius cell")?;
    let l = cell(large, large).ok_or("missing large-radius cell")?;
    let std_large = cell(0.0, large).ok_or("missing standard-game cell")?;
    let recorded = format!(
        "recorded: GUE-AT({large}) vs AT({large}) {:.4} -> {:.4}; standard GUE vs AT({large}) {:.4} -> {:.4}",
        l.clean_mean, l.poisoned_mean, std_large.clean_mean, std_large.poisoned_mean
    );
    ensure(c.degradation >= cfg.thresholds.adv_degradation_min, || {
        format!("GUE-AT({small}) vs AT({small}): degradation {:.4}; {recorded}", c.degradation)
    })?;
    Ok(format!(
        "GUE-AT({small}) vs AT({small}): clean {:.4}, poisoned {:.4}, degradation {:.4} (>= {}); {recorded}",
        c.clean_mean, c.poisoned_mean, c.degradation, cfg.thresholds.adv_degradation_min
    ))
}

// ----- 11: determinism through the CLI -----

fn cli(args: &[&str], jobs: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stackelgrad"))
        .args(args)
        .args(["--quiet", "--jobs", jobs])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                files(&p)
            } else {
                vec![p]
            }
        })
        .collect();
    v.sort();
    v
}

fn run_all_commands(root: &Path, specs: &Path, jobs: &str) -> Result<(), String> {
    let s = |n: &str| specs.join(n).display().to_string();
    let o = |n: &str| root.join(n).display().to_string();
    cli(&["gen-data", "--spec", &s("data.json"), "--out", &o("data")], jobs)?;
    cli(&["train-gen", "--spec", &s("toy.json"), "--out", &o("train")], jobs)?;
    let ckpt = o("train/generator.ckpt");
    cli(
        &[
            "poison",
            "--checkpoint",
            &ckpt,
            "--features",
            &o("data/features.csv"),
            "--labels",
            &o("data/labels.csv"),
            "--out",
            &o("poison"),
        ],
        jobs,
    )?;
    cli(&["eval", "--spec", &s("toy.json"), "--out", &o("eval"), "--checkpoint", &ckpt], jobs)?;
    cli(&["experiment", "--spec", &s("toy.json"), "--out", &o("experiment")], jobs)?;
    cli(&["experiment", "--spec", &s("toy_adv.json"), "--out", &o("experiment_adv")], jobs)?;
    cli(&["diag", "--spec", &s("toy.json"), "--out", &o("diag"), "--seed", "5"], jobs)
}

fn criterion_11() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let specs = tmp.path().join("specs");
    std::fs::create_dir_all(&specs).unwrap();
    let dataset = r#"{"kind": "gaussian-blobs", "classes": 3, "features": 6, "samples": 240, "separation": 4.0, "seed": 3}"#;
    std::fs::write(specs.join("data.json"), dataset).unwrap();
    let toy = format!(
        r#"{{"dataset": {dataset}, "game": {{"budget": 0.8, "epochs": 2, "batch_size": 32, "w_lr": 1.0,
            "classifier_hidden": [8], "generator_encoder": [8, 4], "generator_decoder": [8]}},
            "victim": {{"epochs": 4, "hidden": [8]}}, "fractions": [0.5, 1.0], "seeds": [0, 1], "clean_floor": 0.5}}"#
    );
    std::fs::write(specs.join("toy.json"), &toy).unwrap();
    let toy_adv = toy.replacen(r#""fractions": [0.5, 1.0]"#, r#""scenario": "adversarial", "adv_radii": [0.0, 0.1]"#, 1);
    std::fs::write(specs.join("toy_adv.json"), toy_adv).unwrap();

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all_commands(&a, &specs, "1")?;
    run_all_commands(&b, &specs, "3")?;
    let fa = files(&a);
    let fb = files(&b);
    ensure(fa.len() == fb.len() && !fa.is_empty(), || format!("{} vs {} output files", fa.len(), fb.len()))?;
    for (x, y) in fa.iter().zip(&fb) {
        ensure(x.strip_prefix(&a).unwrap() == y.strip_prefix(&b).unwrap(), || format!("{x:?} vs {y:?}"))?;
        ensure(std::fs::read(x).unwrap() == std::fs::read(y).unwrap(), || format!("{x:?} differs between reruns"))?;
    }
    Ok(format!("7 commands rerun with 1 and 3 worker threads: {} output files byte-identical", fa.len()))
}

// ----- driver -----

fn run(id: usize, name: &str, f: impl FnOnce() -> Check) -> (usize, String, Result<String, String>, f64) {
    let start = Instant::now();
    let out = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    let (tag, text) = match &out {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    eprintln!("  ... criterion {id:>2} {tag} in {secs:.1}s");
    (id, format!("{tag} [{id:>2}] {name}: {text}"), out, secs)
}

fn main() {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/acceptance.json")).unwrap();
    let cfg: Acceptance = serde_json::from_str(&text).unwrap();
    let mut audit = Audit(Vec::new());
    let mut results = vec![
        run(1, "gradient oracle", criterion_1),
        run(2, "surrogate upper bound", criterion_2),
        run(3, "CE-SUR relation", criterion_3),
        run(4, "barrier weight", criterion_4),
        run(5, "analytic bilevel convergence", criterion_5),
        run(6, "degeneracy identities", || criterion_6(&cfg)),
        run(7, "poisoning phenomenon", || criterion_7(&cfg, &mut audit)),
        run(8, "generalization from a training fraction", || criterion_8(&cfg, &mut audit)),
        run(9, "attacker-loss ablation", || criterion_9(&cfg)),
        run(11, "determinism", criterion_11),
        run(12, "adversarial game", || criterion_12(&cfg, &mut audit)),
    ];
    results.push(run(10, "budget audit", || criterion_10(&audit)));
    results.sort_by_key(|r| r.0);

    println!("\nacceptance: {} accuracy evaluations cross-checked against the argmax counter", accuracy_checks());
    for (_, line, _, secs) in &results {
        println!("{line} ({secs:.1}s)");
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
