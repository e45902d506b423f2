//! The poisoning game as a bilevel problem, and generator training.
//!
//! The leader (generator `g_w`) perturbs the training inputs; the follower
//! (classifier `f_theta`) minimizes its loss `J_c` on the perturbed data.
//! The leader's objective `J_a` is evaluated on clean inputs and depends on
//! `theta` only, so the leader steers the follower purely through the
//! lower-level constraint.

use rand::seq::SliceRandom;

use crate::autodiff::{Bindings, Graph};
use crate::bome::{bome_step, BilevelProblem, BomeState, LowerEval, QhatEval};
use crate::config::{CleanBatch, GameConfig};
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{attacker_payoff, inner_max_offset, poisoned_input, victim_loss, victim_rows, LossKind};
use crate::nn::{MlpClassifier, PerturbationGenerator};
use crate::params::ParamVector;
use crate::report::RunReport;
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

/// One solver step's data: the mini-batch to poison and the clean samples
/// entering the attacker payoff.
#[derive(Clone, Debug)]
pub struct GameBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub clean_x: Tensor,
    pub clean_labels: Vec<usize>,
}

impl GameBatch {
    /// Attacker payoff on the clean version of the same samples.
    pub fn same(x: Tensor, labels: Vec<usize>) -> Self {
        Self { clean_x: x.clone(), clean_labels: labels.clone(), x, labels }
    }
}

/// Architectures, losses and clipping of one game; parameters are supplied per call.
#[derive(Clone, Debug)]
pub struct PoisonGame {
    classifier: MlpClassifier,
    generator: PerturbationGenerator,
    victim: LossKind,
    attacker: LossKind,
    clip_range: Option<(f64, f64)>,
}

impl PoisonGame {
    pub fn new(
        classifier: MlpClassifier,
        generator: PerturbationGenerator,
        victim: LossKind,
        attacker: LossKind,
        clip_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        if !victim.is_victim_loss() {
            return Err(Error::Contract(format!("{} is not a victim loss", victim.name())));
        }
        if !attacker.is_attacker_loss() {
            return Err(Error::Contract(format!("{} is not an attacker loss", attacker.name())));
        }
        victim.validate()?;
        if classifier.input_dim() != generator.input_dim() {
            return Err(Error::Contract(format!(
                "classifier expects width {}, generator produces {}",
                classifier.input_dim(),
                generator.input_dim()
            )));
        }
        Ok(Self { classifier, generator, victim, attacker, clip_range })
    }

    pub fn classifier_at(&self, theta: &ParamVector) -> Result<MlpClassifier> {
        let mut m = self.classifier.clone();
        m.set_params(theta.clone())?;
        Ok(m)
    }

    pub fn generator_at(&self, w: &ParamVector) -> Result<PerturbationGenerator> {
        let mut g = self.generator.clone();
        g.set_params(w.clone())?;
        Ok(g)
    }

    pub fn initial_state(&self) -> BomeState {
        BomeState { w: self.generator.params().clone(), theta: self.classifier.params().clone() }
    }
}

impl BilevelProblem for PoisonGame {
    type Batch = GameBatch;

    fn upper(&self, theta: &ParamVector, batch: &GameBatch) -> Result<(f64, ParamVector)> {
        attacker_payoff(&self.classifier_at(theta)?, &batch.clean_x, &batch.clean_labels, &self.attacker)
    }

    fn lower(&self, w: &ParamVector, theta: &ParamVector, batch: &GameBatch) -> Result<LowerEval> {
        let gen = self.generator_at(w)?;
        let p = victim_loss(&self.classifier_at(theta)?, Some(&gen), self.clip_range, &batch.x, &batch.labels, &self.victim, true)?;
        Ok(LowerEval { value: p.value, grad_theta: p.grad_theta, grad_w: p.grad_w.expect("generator present") })
    }

    fn lower_theta(&self, w: &ParamVector, theta: &ParamVector, batch: &GameBatch) -> Result<(f64, ParamVector)> {
        let poisoned = self.generator_at(w)?.poisoned_features(&batch.x, self.clip_range)?;
        let p = victim_loss(&self.classifier_at(theta)?, None, None, &poisoned, &batch.labels, &self.victim, false)?;
        Ok((p.value, p.grad_theta))
    }

    /// Both lower-level terms share one graph; `theta_T` enters through a
    /// stop-gradient so the inner descent is never differentiated.
    fn qhat(&self, w: &ParamVector, theta: &ParamVector, theta_t: &ParamVector, batch: &GameBatch) -> Result<QhatEval> {
        let gen = self.generator_at(w)?;
        let model = self.classifier_at(theta)?;
        let model_t = self.classifier_at(theta_t)?;
        let poisoned = gen.poisoned_features(&batch.x, self.clip_range)?;
        let offset = inner_max_offset(&model, &poisoned, &batch.labels, &self.victim)?;
        let offset_t = inner_max_offset(&model_t, &poisoned, &batch.labels, &self.victim)?;

        let mut g = Graph::new();
        let x = g.input("x");
        let w_ids = w.register(&mut g, "w");
        let th_ids = theta.register(&mut g, "theta");
        let tt_ids = theta_t.register(&mut g, "theta_T");
        let frozen: Vec<_> = tt_ids.iter().map(|&id| g.stop_gradient(id)).collect();
        let xp = poisoned_input(&mut g, x, &gen, &w_ids, self.clip_range);
        let rows = victim_rows(&mut g, &model, &th_ids, xp, &batch.labels, &self.victim, offset.as_ref())?;
        let rows_t = victim_rows(&mut g, &model_t, &frozen, xp, &batch.labels, &self.victim, offset_t.as_ref())?;
        let h = g.mean(rows);
        let h_t = g.mean(rows_t);
        let q = g.sub(h, h_t);

        let mut b = Bindings::new().with(x, batch.x.clone());
        w.bind(&mut b, &w_ids);
        theta.bind(&mut b, &th_ids);
        theta_t.bind(&mut b, &tt_ids);
        let ev = g.forward(&b)?;
        let grads = ev.backward(q)?;
        Ok(QhatEval {
            value: ev.value(q).item(),
            lower_at_theta: ev.value(h).item(),
            lower_at_theta_t: ev.value(h_t).item(),
            grad_theta: ParamVector::from_grads(&grads, &th_ids),
            grad_w: ParamVector::from_grads(&grads, &w_ids),
        })
    }
}

/// Freshly initialized players for `cfg` on inputs of width `features`.
pub fn initial_players(cfg: &GameConfig, features: usize, classes: usize) -> Result<(MlpClassifier, PerturbationGenerator)> {
    let classifier = MlpClassifier::new(
        cfg.classifier_dims(features, classes),
        cfg.activation,
        &mut stream(cfg.seed, streams::CLASSIFIER_INIT),
    )?;
    let (enc, dec) = cfg.generator_dims(features);
    let generator =
        PerturbationGenerator::new(enc, dec, cfg.activation, cfg.budget, &mut stream(cfg.seed, streams::GENERATOR_INIT))?;
    Ok((classifier, generator))
}

/// Result of a completed generator training run.
#[derive(Clone, Debug)]
pub struct TrainedGame {
    pub generator: PerturbationGenerator,
    /// The follower's final parameters (not used for evaluation).
    pub classifier: MlpClassifier,
    pub report: RunReport,
}

/// A failed run, carrying every step recorded before the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: Error,
    pub report: RunReport,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, report: RunReport::new() }
    }
}

/// Trains the generator on the train split of `data` by running the bilevel
/// solver over shuffled mini-batches for `cfg.epochs` epochs.
pub fn train_generator(cfg: &GameConfig, data: &LabeledDataset) -> Result<TrainedGame, TrainFailure> {
    cfg.validate()?;
    if data.classes() < 2 {
        return Err(Error::Contract(format!("need at least 2 classes, got {}", data.classes())).into());
    }
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()).into());
    }
    let (classifier, generator) = initial_players(cfg, data.dim(), data.classes())?;
    let game = PoisonGame::new(classifier, generator, cfg.victim_kind(), cfg.attacker_kind(), cfg.clip_range)?;
    let bome = cfg.bome();
    let mut state = game.initial_state();
    let mut report = RunReport::new();
    let mut batch_rng = stream(cfg.seed, streams::BATCHES);
    let mut clean_rng = stream(cfg.seed, streams::CLEAN_BATCHES);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut batch_rng);
        let clean_order = match cfg.clean_batch {
            CleanBatch::Same => None,
            CleanBatch::Disjoint => {
                let mut o = train.clone();
                o.shuffle(&mut clean_rng);
                Some(o)
            }
        };
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(data, idx, clean_order.as_ref().map(|o| &o[b * cfg.batch_size..][..idx.len()]))?;
            match bome_step(&game, &state, &batch, &bome, step) {
                Ok((next, mut trace)) => {
                    trace.epoch = epoch;
                    report.push(trace);
                    state = next;
                }
                Err(error) => return Err(TrainFailure { error, report }),
            }
            step += 1;
        }
    }
    let generator = game.generator_at(&state.w).map_err(|error| TrainFailure { error, report: report.clone() })?;
    let classifier = game.classifier_at(&state.theta).map_err(|error| TrainFailure { error, report: report.clone() })?;
    Ok(TrainedGame { generator, classifier, report })
}

fn make_batch(data: &LabeledDataset, idx: &[usize], clean: Option<&[usize]>) -> Result<GameBatch> {
    let x = data.features().select_rows(idx);
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
    Ok(match clean {
        None => GameBatch::same(x, labels),
        Some(c) => GameBatch {
            x,
            labels,
            clean_x: data.features().select_rows(c),
            clean_labels: c.iter().map(|&i| data.labels()[i]).collect(),
        },
    })
}
