//! First-order bilevel solver.
//!
//! The bilevel problem `min l(w, theta) s.t. theta in argmin h(w, .)` is
//! replaced by the single-level constraint `q(w, theta) = h(w, theta) -
//! min h(w, .) <= 0`. The minimum is estimated by `T` descent steps started
//! at the current `theta`, giving `q_hat = h(w, theta) - h(w, theta_T)` with
//! `theta_T` held constant when differentiating. Each outer step then moves
//! along `grad l + lambda * grad q_hat`, where the barrier weight
//!
//! ```text
//! lambda = max((rho * |grad q_hat|^2 - <grad l, grad q_hat>) / |grad q_hat|^2, 0)
//! ```
//!
//! is the smallest multiplier that still decreases `q_hat` at rate `rho`.
//!
//! In the poisoning game the upper objective depends on `theta` alone, so the
//! attacker parameters `w` move only through `lambda * grad_w q_hat`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamVector;

/// Below this squared norm the constraint gradient is treated as zero.
pub const DEGENERATE_NORM_SQ: f64 = 1e-24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerOptimizer {
    #[default]
    Adam,
    Gd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BomeConfig {
    /// `T`, the number of inner descent steps.
    pub inner_steps: usize,
    /// `alpha`, the inner step size.
    pub inner_step_size: f64,
    pub inner_optimizer: InnerOptimizer,
    /// Outer step size for the follower parameters.
    pub theta_step: f64,
    /// Outer step size for the leader parameters.
    pub w_step: f64,
    pub rho: f64,
    /// Caps `|grad_theta l|` before the update.
    pub grad_clip: Option<f64>,
}

impl Default for BomeConfig {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            inner_step_size: 1e-3,
            inner_optimizer: InnerOptimizer::Adam,
            theta_step: 0.01,
            w_step: 0.1,
            rho: 1.5,
            grad_clip: None,
        }
    }
}

impl BomeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps", "must be at least 1"));
        }
        for (name, v) in [
            ("inner_step_size", self.inner_step_size),
            ("theta_lr", self.theta_step),
            ("w_lr", self.w_step),
            ("rho", self.rho),
        ] {
            if !positive(v) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !positive(c) {
                return Err(Error::config("grad_clip", format!("must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Value and gradients of `q_hat` at `(w, theta)` with `theta_T` frozen.
#[derive(Clone, Debug)]
pub struct QhatEval {
    pub value: f64,
    /// `h(w, theta)`
    pub lower_at_theta: f64,
    /// `h(w, theta_T)`
    pub lower_at_theta_t: f64,
    pub grad_theta: ParamVector,
    pub grad_w: ParamVector,
}

/// A lower-level objective value with gradients in both blocks.
#[derive(Clone, Debug)]
pub struct LowerEval {
    pub value: f64,
    pub grad_theta: ParamVector,
    pub grad_w: ParamVector,
}

/// A bilevel problem whose upper objective depends on `theta` only.
pub trait BilevelProblem {
    type Batch;

    /// `l(theta)` and `grad_theta l`.
    fn upper(&self, theta: &ParamVector, batch: &Self::Batch) -> Result<(f64, ParamVector)>;

    /// `h(w, theta)` with gradients in `theta` and `w`.
    fn lower(&self, w: &ParamVector, theta: &ParamVector, batch: &Self::Batch) -> Result<LowerEval>;

    /// `h(w, theta)` and `grad_theta h` only; used by the inner loop.
    fn lower_theta(&self, w: &ParamVector, theta: &ParamVector, batch: &Self::Batch) -> Result<(f64, ParamVector)> {
        let e = self.lower(w, theta, batch)?;
        Ok((e.value, e.grad_theta))
    }

    /// `q_hat` with `theta_T` under stop-gradient. The default assembles it
    /// from two lower-level evaluations.
    fn qhat(
        &self,
        w: &ParamVector,
        theta: &ParamVector,
        theta_t: &ParamVector,
        batch: &Self::Batch,
    ) -> Result<QhatEval> {
        let at = self.lower(w, theta, batch)?;
        let frozen = self.lower(w, theta_t, batch)?;
        Ok(QhatEval {
            value: at.value - frozen.value,
            lower_at_theta: at.value,
            lower_at_theta_t: frozen.value,
            grad_theta: at.grad_theta,
            grad_w: at.grad_w.sub(&frozen.grad_w),
        })
    }
}

/// Runs `T` optimizer steps on `h(w, .)` from `theta_start`. Returns
/// `theta_T` and the lower objective before each step.
pub fn inner_approx<P: BilevelProblem>(
    problem: &P,
    w: &ParamVector,
    theta_start: &ParamVector,
    batch: &P::Batch,
    cfg: &BomeConfig,
) -> Result<(ParamVector, Vec<f64>)> {
    if cfg.inner_steps == 0 {
        return Err(Error::Contract("inner_approx needs at least one step".into()));
    }
    let mut theta = theta_start.clone();
    let mut values = Vec::with_capacity(cfg.inner_steps);
    let mut adam = match cfg.inner_optimizer {
        InnerOptimizer::Adam => Some(Adam::new(AdamConfig::with_lr(cfg.inner_step_size), &theta)),
        InnerOptimizer::Gd => None,
    };
    for t in 0..cfg.inner_steps {
        let (value, grad) = problem.lower_theta(w, &theta, batch).map_err(|e| inner_error(t, e))?;
        if !value.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged { step: t, detail: format!("inner loss {value} at inner step {t}") });
        }
        values.push(value);
        match adam.as_mut() {
            Some(opt) => opt.step(&mut theta, &grad),
            None => theta.axpy(-cfg.inner_step_size, &grad),
        }
    }
    Ok((theta, values))
}

fn inner_error(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { node, op } => {
            Error::Diverged { step, detail: format!("non-finite value at node {node} ({op}) in inner step {step}") }
        }
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaOutcome {
    pub lambda: f64,
    /// `|grad q_hat|^2` fell below [`DEGENERATE_NORM_SQ`]; the constraint term was skipped.
    pub degenerate: bool,
}

/// Dynamic barrier weight for `phi = rho * |grad_q|^2`.
pub fn lambda_k(grad_l: &ParamVector, grad_q: &ParamVector, rho: f64) -> LambdaOutcome {
    let norm_sq = grad_q.norm_sq();
    if !(norm_sq >= DEGENERATE_NORM_SQ) {
        return LambdaOutcome { lambda: 0.0, degenerate: true };
    }
    let phi = rho * norm_sq;
    let lambda = ((phi - grad_l.dot(grad_q)) / norm_sq).max(0.0);
    LambdaOutcome { lambda, degenerate: false }
}

/// Joint state of the two players.
#[derive(Clone, Debug, PartialEq)]
pub struct BomeState {
    pub w: ParamVector,
    pub theta: ParamVector,
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BomeStepTrace {
    pub step: usize,
    pub epoch: usize,
    /// `h(w_k, theta_k)`
    pub j_c: f64,
    /// `h(w_k, theta_T)`
    pub j_c_after: f64,
    /// `l(theta_k)`
    pub j_a: f64,
    pub qhat: f64,
    pub lambda: f64,
    /// `|grad_theta l|` as applied (after clipping).
    pub grad_ja_norm: f64,
    pub grad_ja_norm_raw: f64,
    pub grad_q_norm: f64,
    pub degenerate: bool,
}

/// One simultaneous update of both players.
pub fn bome_step<P: BilevelProblem>(
    problem: &P,
    state: &BomeState,
    batch: &P::Batch,
    cfg: &BomeConfig,
    step: usize,
) -> Result<(BomeState, BomeStepTrace)> {
    let (j_a, mut grad_l) = problem.upper(&state.theta, batch).map_err(|e| inner_error(step, e))?;
    let grad_ja_norm_raw = grad_l.norm();
    if let Some(cap) = cfg.grad_clip {
        if grad_ja_norm_raw > cap {
            grad_l = clip_to_norm(&grad_l, grad_ja_norm_raw, cap);
        }
    }
    let grad_ja_norm = grad_l.norm();

    let (theta_t, _) = inner_approx(problem, &state.w, &state.theta, batch, cfg).map_err(|e| match e {
        Error::Diverged { detail, .. } => Error::Diverged { step, detail },
        other => other,
    })?;
    let q = problem.qhat(&state.w, &state.theta, &theta_t, batch).map_err(|e| inner_error(step, e))?;

    // Full-space vectors over (theta, w); the upper objective has no w block.
    let grad_l_full = grad_l.concat(&state.w.zeros_like());
    let grad_q_full = q.grad_theta.concat(&q.grad_w);
    let LambdaOutcome { lambda, degenerate } = lambda_k(&grad_l_full, &grad_q_full, cfg.rho);

    let mut theta = state.theta.clone();
    theta.axpy(-cfg.theta_step, &grad_l);
    let mut w = state.w.clone();
    if lambda != 0.0 {
        theta.axpy(-cfg.theta_step * lambda, &q.grad_theta);
        w.axpy(-cfg.w_step * lambda, &q.grad_w);
    }

    let trace = BomeStepTrace {
        step,
        epoch: 0,
        j_c: q.lower_at_theta,
        j_c_after: q.lower_at_theta_t,
        j_a,
        qhat: q.value,
        lambda,
        grad_ja_norm,
        grad_ja_norm_raw,
        grad_q_norm: grad_q_full.norm(),
        degenerate,
    };
    let finite = [trace.j_c, trace.j_c_after, trace.j_a, trace.qhat, trace.lambda].iter().all(|v| v.is_finite());
    if !finite || !theta.all_finite() || !w.all_finite() {
        return Err(Error::Diverged { step, detail: format!("non-finite iterate or diagnostics: {trace:?}") });
    }
    Ok((BomeState { w, theta }, trace))
}

/// Rescales `g` (of norm `norm > cap`) so that its recomputed norm is at most
/// `cap`, shrinking the factor by single ulps when rounding overshoots.
fn clip_to_norm(g: &ParamVector, norm: f64, cap: f64) -> ParamVector {
    let mut factor = cap / norm;
    loop {
        let scaled = g.scaled(factor);
        if scaled.norm() <= cap {
            return scaled;
        }
        factor = factor.next_down();
    }
}

/// Applies [`bome_step`] once per batch.
pub fn run<P: BilevelProblem>(
    problem: &P,
    mut state: BomeState,
    batches: impl IntoIterator<Item = P::Batch>,
    cfg: &BomeConfig,
) -> Result<(BomeState, Vec<BomeStepTrace>)> {
    cfg.validate()?;
    let mut traces = Vec::new();
    for (k, batch) in batches.into_iter().enumerate() {
        let (next, trace) = bome_step(problem, &state, &batch, cfg, k)?;
        state = next;
        traces.push(trace);
    }
    Ok((state, traces))
}

/// `l(theta) = (theta - target)^2` and `h(w, theta) = (theta - w)^2` over
/// scalars. The lower level forces `theta = w` and the upper level
/// `theta = target`, so the unique solution is `w = theta = target`.
#[derive(Clone, Copy, Debug)]
pub struct ScalarBilevel {
    pub target: f64,
}

impl ScalarBilevel {
    pub fn point(v: f64) -> ParamVector {
        ParamVector::new(vec![crate::tensor::Tensor::vector(vec![v])])
    }

    pub fn value(p: &ParamVector) -> f64 {
        p.tensors()[0].data()[0]
    }
}

impl BilevelProblem for ScalarBilevel {
    type Batch = ();

    fn upper(&self, theta: &ParamVector, _: &()) -> Result<(f64, ParamVector)> {
        let d = Self::value(theta) - self.target;
        Ok((d * d, Self::point(2.0 * d)))
    }

    fn lower(&self, w: &ParamVector, theta: &ParamVector, _: &()) -> Result<LowerEval> {
        let d = Self::value(theta) - Self::value(w);
        Ok(LowerEval { value: d * d, grad_theta: Self::point(2.0 * d), grad_w: Self::point(-2.0 * d) })
    }
}
