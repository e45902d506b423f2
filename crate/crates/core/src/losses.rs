//! Losses and the two players' payoffs.
//!
//! Every loss exists twice: a plain scalar routine over one logit row (used
//! for reporting and property checks) and a graph builder producing one
//! value per batch row (used for training). The unit tests hold the two
//! routes against each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_in_place, Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{MlpClassifier, PerturbationGenerator};
use crate::params::ParamVector;
use crate::tensor::Tensor;

/// Floor applied to `1 - (K-1) e^{L_sur}` before taking its log.
pub const BOUND_LOG_FLOOR: f64 = 1e-300;

fn checked_row(logits: &Tensor, y: usize, min_classes: usize) -> Result<Vec<f64>> {
    let k = logits.numel();
    if logits.rows() != 1 {
        return Err(Error::Contract(format!("expected one logit row, got shape {:?}", logits.shape())));
    }
    if k < min_classes {
        return Err(Error::Contract(format!("loss needs at least {min_classes} classes, got {k}")));
    }
    if y >= k {
        return Err(Error::Contract(format!("label {y} outside [0, {k})")));
    }
    Ok(logits.data().to_vec())
}

fn log_probs(logits: &Tensor, y: usize, min_classes: usize) -> Result<Vec<f64>> {
    let mut row = checked_row(logits, y, min_classes)?;
    log_softmax_in_place(&mut row);
    Ok(row)
}

/// `-log softmax(logits)[y]`
pub fn ce_loss(logits: &Tensor, y: usize) -> Result<f64> {
    Ok(-log_probs(logits, y, 1)?[y])
}

/// `-max_{k != y} CE(logits, k)`, i.e. the log of the smallest off-label probability.
pub fn surrogate_loss(logits: &Tensor, y: usize) -> Result<f64> {
    let lp = log_probs(logits, y, 2)?;
    Ok(lp
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min))
}

/// Both sides of `CE >= -log(1 - (K-1) e^{L_sur})`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// The log argument was at or below [`BOUND_LOG_FLOOR`] and got floored.
    pub clamped: bool,
}

pub fn ce_sur_bound_check(logits: &Tensor, y: usize) -> Result<BoundCheck> {
    let lp = log_probs(logits, y, 2)?;
    let lhs = -lp[y];
    let sur = surrogate_loss(logits, y)?;
    // 1 - (K-1) p_min rewritten as p_y + sum_{k != y} (p_k - p_min): every term
    // is non-negative, so nothing cancels when p_y is tiny.
    let p_min = sur.exp();
    let spread: f64 = lp
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| if p_min > 0.0 { p_min * (v - sur).exp_m1() } else { v.exp() })
        .sum();
    let arg = lp[y].exp() + spread;
    let clamped = !(arg > BOUND_LOG_FLOOR);
    let rhs = -arg.max(BOUND_LOG_FLOOR).ln();
    Ok(BoundCheck { lhs, rhs, clamped })
}

/// Index of the largest off-label logit, lowest index on ties.
fn best_other(row: &[f64], y: usize) -> usize {
    let mut best = if y == 0 { 1 } else { 0 };
    for (k, &v) in row.iter().enumerate() {
        if k != y && v > row[best] {
            best = k;
        }
    }
    best
}

/// Carlini-Wagner margin `max_{l != y} z_l - z_y`.
pub fn cw_loss(logits: &Tensor, y: usize) -> Result<f64> {
    let row = checked_row(logits, y, 2)?;
    Ok(row[best_other(&row, y)] - row[y])
}

/// `0` when `cw_loss >= 0` (misclassified or tied), `-1` when correct.
pub fn acc_loss(logits: &Tensor, y: usize) -> Result<f64> {
    Ok(if cw_loss(logits, y)? >= 0.0 { 0.0 } else { -1.0 })
}

/// `-mean(L_acc)` over every row of a logit matrix: the accuracy.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = Tensor::vector(logits.row(r).to_vec());
        total += acc_loss(&row, y)?;
    }
    Ok(-total / labels.len() as f64)
}

// ----- graph builders: one value per batch row -----

/// For each row, the `j`-th label other than `y`, in ascending order.
fn off_label_index(labels: &[usize], j: usize) -> Vec<usize> {
    labels.iter().map(|&y| if j < y { j } else { j + 1 }).collect()
}

/// Row-wise `max_{k != y} a[r, k]`. Ties resolve to the lowest index.
fn max_off_label(g: &mut Graph, a: NodeId, labels: &[usize], classes: usize) -> NodeId {
    let mut acc = g.gather(a, off_label_index(labels, 0));
    for j in 1..classes - 1 {
        let next = g.gather(a, off_label_index(labels, j));
        acc = g.maximum(acc, next);
    }
    acc
}

pub fn ce_rows(g: &mut Graph, logits: NodeId, labels: &[usize]) -> NodeId {
    let lp = g.log_softmax(logits);
    let picked = g.gather(lp, labels.to_vec());
    g.neg(picked)
}

pub fn sur_rows(g: &mut Graph, logits: NodeId, labels: &[usize], classes: usize) -> NodeId {
    let lp = g.log_softmax(logits);
    let neg_lp = g.neg(lp);
    let worst = max_off_label(g, neg_lp, labels, classes);
    g.neg(worst)
}

pub fn cw_rows(g: &mut Graph, logits: NodeId, labels: &[usize], classes: usize) -> NodeId {
    let other = max_off_label(g, logits, labels, classes);
    let own = g.gather(logits, labels.to_vec());
    g.sub(other, own)
}

// ----- loss selection -----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PgdStart {
    /// Start at the clean point.
    Clean,
    /// Start at `x + scale * N(0, 1)` (clipped to the ball), drawn from a fixed seed.
    Jitter { scale: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    /// Defaults to a quarter of the radius.
    pub step_size: Option<f64>,
    pub start: PgdStart,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self { steps: 10, step_size: None, start: PgdStart::Clean }
    }
}

impl PgdConfig {
    pub fn step_for(&self, radius: f64) -> f64 {
        self.step_size.unwrap_or(radius / 4.0)
    }
}

/// Start used for the KL inner maximization: at the clean point the KL
/// gradient vanishes identically, so sign-PGD would never move.
pub const TRADES_START: PgdStart = PgdStart::Jitter { scale: 1e-3, seed: 0 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Ce,
    Sur,
    Cw,
    Acc,
    Adv { radius: f64, pgd: PgdConfig },
    Trades { radius: f64, lambda: f64, pgd: PgdConfig },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Sur => "sur",
            LossKind::Cw => "cw",
            LossKind::Acc => "acc",
            LossKind::Adv { .. } => "adv",
            LossKind::Trades { .. } => "trades",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pgd_ok = |pgd: &PgdConfig| pgd.steps >= 1 && pgd.step_size.is_none_or(|s| s >= 0.0);
        match *self {
            LossKind::Adv { radius, pgd } if !(radius >= 0.0 && radius.is_finite() && pgd_ok(&pgd)) => {
                Err(Error::Contract(format!("invalid adversarial loss: radius {radius}, pgd {pgd:?}")))
            }
            LossKind::Trades { radius, lambda, pgd }
                if !(radius >= 0.0 && radius.is_finite() && lambda > 0.0 && pgd_ok(&pgd)) =>
            {
                Err(Error::Contract(format!("invalid TRADES loss: radius {radius}, lambda {lambda}, pgd {pgd:?}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_victim_loss(&self) -> bool {
        matches!(self, LossKind::Ce | LossKind::Adv { .. } | LossKind::Trades { .. })
    }

    pub fn is_attacker_loss(&self) -> bool {
        matches!(self, LossKind::Sur | LossKind::Ce | LossKind::Cw | LossKind::Acc)
    }
}

// ----- PGD -----

#[derive(Clone, Debug, PartialEq)]
pub enum PgdObjective {
    CrossEntropy,
    /// `KL(anchor || softmax(f(x')))` with the anchor log-probabilities held constant.
    KlFromAnchor(Tensor),
}

/// Moves `candidate` onto the closed box of half-width `radius` around `base`
/// such that the computed `|candidate - base|` never exceeds `radius`.
pub fn project_linf(base: f64, candidate: f64, radius: f64) -> f64 {
    let mut v = candidate.clamp(base - radius, base + radius);
    while (v - base).abs() > radius {
        v = if v > base { v.next_down() } else { v.next_up() };
    }
    v
}

fn model_graph(model: &MlpClassifier) -> (Graph, NodeId, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let x = g.input("x");
    let ids = model.params().register(&mut g, "theta");
    let logits = model.build_logits(&mut g, x, &ids);
    (g, x, ids, logits)
}

fn check_batch(model: &MlpClassifier, x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != model.input_dim() || x.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "batch {:?} with {} labels does not fit a model of input width {}",
            x.shape(),
            labels.len(),
            model.input_dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::Contract(format!("label {bad} outside [0, {})", model.num_classes())));
    }
    Ok(())
}

/// Result of a PGD run: the adversarial batch and its per-row objective.
#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub x_adv: Tensor,
    pub objective: Vec<f64>,
    pub start_objective: Vec<f64>,
}

/// Sign-gradient ascent inside the max-norm ball of `radius` around `x`,
/// keeping, per row, the best iterate seen (the start included).
pub fn pgd_run(
    model: &MlpClassifier,
    x: &Tensor,
    labels: &[usize],
    radius: f64,
    pgd: &PgdConfig,
    objective: &PgdObjective,
) -> Result<PgdOutcome> {
    check_batch(model, x, labels)?;
    if !(radius >= 0.0) || pgd.steps == 0 {
        return Err(Error::Contract(format!("PGD needs radius >= 0 and steps >= 1, got {radius}, {}", pgd.steps)));
    }
    let (mut g, xid, ids, logits) = model_graph(model);
    let rows = match objective {
        PgdObjective::CrossEntropy => ce_rows(&mut g, logits, labels),
        PgdObjective::KlFromAnchor(anchor) => {
            let a = g.constant(anchor.clone());
            let lq = g.log_softmax(logits);
            g.kl_div(a, lq)
        }
    };
    let root = g.sum(rows);
    let mut bind = Bindings::new();
    model.params().bind(&mut bind, &ids);

    let cols = x.cols();
    let mut current = x.clone();
    if let PgdStart::Jitter { scale, seed } = pgd.start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (v, &base) in current.data_mut().iter_mut().zip(x.data()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = project_linf(base, base + scale * z, radius);
        }
    }
    let step = pgd.step_for(radius);
    let mut best = current.clone();
    let mut best_obj = vec![f64::NEG_INFINITY; labels.len()];
    let mut start_obj = Vec::new();

    for t in 0..=pgd.steps {
        bind.set(xid, current.clone());
        let ev = g.forward(&bind)?;
        let obj = ev.value(rows).data();
        for r in 0..labels.len() {
            if obj[r] > best_obj[r] {
                best_obj[r] = obj[r];
                best.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(current.row(r));
            }
        }
        if t == 0 {
            start_obj = obj.to_vec();
        }
        if t == pgd.steps {
            break;
        }
        let grads = ev.backward(root)?;
        let gx = grads.of(xid);
        for ((v, &gv), &base) in current.data_mut().iter_mut().zip(gx.data()).zip(x.data()) {
            let s = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = project_linf(base, *v + step * s, radius);
        }
    }
    Ok(PgdOutcome { x_adv: best, objective: best_obj, start_objective: start_obj })
}

pub fn pgd_attack(
    model: &MlpClassifier,
    x: &Tensor,
    labels: &[usize],
    radius: f64,
    pgd: &PgdConfig,
    objective: &PgdObjective,
) -> Result<Tensor> {
    Ok(pgd_run(model, x, labels, radius, pgd, objective)?.x_adv)
}

/// Clean log-probabilities, the KL anchor for the TRADES inner maximization.
pub fn anchor_log_probs(model: &MlpClassifier, x: &Tensor) -> Result<Tensor> {
    let mut logits = model.classify(x)?;
    let cols = logits.cols();
    for r in 0..logits.rows() {
        log_softmax_in_place(&mut logits.data_mut()[r * cols..(r + 1) * cols]);
    }
    Ok(logits)
}

/// Offset `x_adv - x` found by the inner maximization of an adversarial
/// victim loss, or `None` for losses without one.
pub fn inner_max_offset(model: &MlpClassifier, x: &Tensor, labels: &[usize], loss: &LossKind) -> Result<Option<Tensor>> {
    let outcome = match loss {
        LossKind::Adv { radius, pgd } => pgd_run(model, x, labels, *radius, pgd, &PgdObjective::CrossEntropy)?,
        LossKind::Trades { radius, pgd, .. } => {
            let anchor = anchor_log_probs(model, x)?;
            pgd_run(model, x, labels, *radius, pgd, &PgdObjective::KlFromAnchor(anchor))?
        }
        _ => return Ok(None),
    };
    Ok(Some(outcome.x_adv.zip_map(x, |a, b| a - b)))
}

/// Per-row victim loss of `model_params` at input node `x`; `offset` is the
/// constant inner-maximization offset for ADV and TRADES.
pub fn victim_rows(
    g: &mut Graph,
    model: &MlpClassifier,
    theta: &[NodeId],
    x: NodeId,
    labels: &[usize],
    loss: &LossKind,
    offset: Option<&Tensor>,
) -> Result<NodeId> {
    let shifted = |g: &mut Graph| -> Result<NodeId> {
        let off = offset.ok_or_else(|| Error::Contract(format!("{} loss needs an offset", loss.name())))?;
        let c = g.constant(off.clone());
        Ok(g.add(x, c))
    };
    Ok(match loss {
        LossKind::Ce => {
            let logits = model.build_logits(g, x, theta);
            ce_rows(g, logits, labels)
        }
        LossKind::Adv { .. } => {
            let xa = shifted(g)?;
            let logits = model.build_logits(g, xa, theta);
            ce_rows(g, logits, labels)
        }
        LossKind::Trades { lambda, .. } => {
            let xa = shifted(g)?;
            let clean = model.build_logits(g, x, theta);
            let adv = model.build_logits(g, xa, theta);
            let ce = ce_rows(g, clean, labels);
            let lp = g.log_softmax(clean);
            let lq = g.log_softmax(adv);
            let kl = g.kl_div(lp, lq);
            let kl = g.scale(kl, 1.0 / lambda);
            g.add(ce, kl)
        }
        other => return Err(Error::Contract(format!("{} is not a victim loss", other.name()))),
    })
}

/// Per-row attacker loss `L_a` (differentiable kinds only).
pub fn attacker_rows(g: &mut Graph, logits: NodeId, labels: &[usize], classes: usize, loss: &LossKind) -> Result<NodeId> {
    Ok(match loss {
        LossKind::Ce => ce_rows(g, logits, labels),
        LossKind::Sur => sur_rows(g, logits, labels, classes),
        LossKind::Cw => cw_rows(g, logits, labels, classes),
        other => return Err(Error::Contract(format!("{} has no differentiable attacker form", other.name()))),
    })
}

/// Mean maximized CE over a batch.
pub fn adv_loss(model: &MlpClassifier, x: &Tensor, labels: &[usize], radius: f64, pgd: &PgdConfig) -> Result<f64> {
    let out = pgd_run(model, x, labels, radius, pgd, &PgdObjective::CrossEntropy)?;
    Ok(out.objective.iter().sum::<f64>() / labels.len() as f64)
}

/// Mean `CE(x) + KL(f(x) || f(x_adv)) / lambda` over a batch.
pub fn trades_loss(
    model: &MlpClassifier,
    x: &Tensor,
    labels: &[usize],
    radius: f64,
    lambda: f64,
    pgd: &PgdConfig,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Contract(format!("TRADES lambda must be positive, got {lambda}")));
    }
    let loss = LossKind::Trades { radius, lambda, pgd: *pgd };
    Ok(victim_loss(model, None, None, x, labels, &loss, false)?.value)
}

// ----- payoffs -----

/// A payoff value with its gradients.
#[derive(Clone, Debug)]
pub struct Payoff {
    pub value: f64,
    pub grad_theta: ParamVector,
    /// Present when a generator took part in the evaluation.
    pub grad_w: Option<ParamVector>,
}

/// `x + g_w(x)`, clamped when a range is given, appended to `g`.
pub fn poisoned_input(
    g: &mut Graph,
    x: NodeId,
    generator: &PerturbationGenerator,
    w: &[NodeId],
    clip_range: Option<(f64, f64)>,
) -> NodeId {
    let delta = generator.build_perturbation(g, x, w);
    let sum = g.add(x, delta);
    match clip_range {
        Some((lo, hi)) => g.clamp(sum, lo, hi),
        None => sum,
    }
}

/// Mean victim loss on a batch, optionally poisoned by `generator` inside the
/// graph, with gradients for the classifier and (when `want_w`) the generator.
pub fn victim_loss(
    model: &MlpClassifier,
    generator: Option<&PerturbationGenerator>,
    clip_range: Option<(f64, f64)>,
    x: &Tensor,
    labels: &[usize],
    loss: &LossKind,
    want_w: bool,
) -> Result<Payoff> {
    check_batch(model, x, labels)?;
    loss.validate()?;
    let mut g = Graph::new();
    let xid = g.input("x");
    let mut bind = Bindings::new().with(xid, x.clone());
    let (xin, w_ids, x_numeric) = match generator {
        Some(gen) => {
            let ids = gen.params().register(&mut g, "w");
            gen.params().bind(&mut bind, &ids);
            let xin = poisoned_input(&mut g, xid, gen, &ids, clip_range);
            (xin, ids, gen.poisoned_features(x, clip_range)?)
        }
        None => (xid, Vec::new(), x.clone()),
    };
    let offset = inner_max_offset(model, &x_numeric, labels, loss)?;
    let theta = model.params().register(&mut g, "theta");
    model.params().bind(&mut bind, &theta);
    let rows = victim_rows(&mut g, model, &theta, xin, labels, loss, offset.as_ref())?;
    let root = g.mean(rows);
    let ev = g.forward(&bind)?;
    let value = ev.value(root).item();
    let grads = ev.backward(root)?;
    let grad_theta = ParamVector::from_grads(&grads, &theta);
    let grad_w = (generator.is_some() && want_w).then(|| ParamVector::from_grads(&grads, &w_ids));
    Ok(Payoff { value, grad_theta, grad_w })
}

/// `J_a = -mean L_a` on clean inputs, with its gradient in the classifier.
pub fn attacker_payoff(model: &MlpClassifier, x: &Tensor, labels: &[usize], loss: &LossKind) -> Result<(f64, ParamVector)> {
    check_batch(model, x, labels)?;
    if !loss.is_attacker_loss() {
        return Err(Error::Contract(format!("{} is not an attacker loss", loss.name())));
    }
    if *loss == LossKind::Acc {
        let acc = accuracy_from_logits(&model.classify(x)?, labels)?;
        // -mean(L_acc) is piecewise constant: its gradient is zero almost everywhere.
        return Ok((acc, model.params().zeros_like()));
    }
    let (mut g, xid, ids, logits) = model_graph(model);
    let rows = attacker_rows(&mut g, logits, labels, model.num_classes(), loss)?;
    let mean = g.mean(rows);
    let root = g.neg(mean);
    let mut bind = Bindings::new().with(xid, x.clone());
    model.params().bind(&mut bind, &ids);
    let ev = g.forward(&bind)?;
    let value = ev.value(root).item();
    let grads = ev.backward(root)?;
    Ok((value, ParamVector::from_grads(&grads, &ids)))
}

/// Evaluation context for the payoffs: a data split, the classifier, and the
/// attacker's generator when poisoning is in effect.
#[derive(Clone, Copy, Debug)]
pub struct PayoffContext<'a> {
    pub data: &'a crate::data::LabeledDataset,
    pub classifier: &'a MlpClassifier,
    pub generator: Option<&'a PerturbationGenerator>,
    pub clip_range: Option<(f64, f64)>,
}

impl PayoffContext<'_> {
    fn check(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::Contract("payoff over an empty split".into()));
        }
        Ok(())
    }
}

/// `J_c = E_S[L_c(x + g_w(x), y; theta)]`
pub fn payoff_victim(ctx: &PayoffContext<'_>, loss_c: &LossKind) -> Result<Payoff> {
    ctx.check()?;
    if !loss_c.is_victim_loss() {
        return Err(Error::Contract(format!("{} is not a victim loss", loss_c.name())));
    }
    victim_loss(
        ctx.classifier,
        ctx.generator,
        ctx.clip_range,
        ctx.data.features(),
        ctx.data.labels(),
        loss_c,
        true,
    )
}

/// `J_a = -E_S[L_a(x, y; theta)]` on clean inputs. The generator never
/// enters, so its gradient is identically zero.
pub fn payoff_attacker(ctx: &PayoffContext<'_>, loss_a: &LossKind) -> Result<Payoff> {
    ctx.check()?;
    let (value, grad_theta) = attacker_payoff(ctx.classifier, ctx.data.features(), ctx.data.labels(), loss_a)?;
    let grad_w = ctx.generator.map(|g| g.params().zeros_like());
    Ok(Payoff { value, grad_theta, grad_w })
}
