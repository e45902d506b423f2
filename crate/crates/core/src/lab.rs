//! Victim retraining and the experiment suite.
//!
//! Every victim is trained from a fresh initialization on the train split and
//! scored on the clean test split. Independent cells (seeds, fractions,
//! radii) run on the ambient rayon pool; results are collected in input
//! order, so tables do not depend on scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AttackerLoss, ExperimentSpec, GameConfig, VictimLoss, VictimRecipe};
use crate::data::{make_synthetic, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::game::{train_generator, TrainFailure};
use crate::losses::{accuracy_from_logits, victim_loss, LossKind};
use crate::nn::{MlpClassifier, PerturbationGenerator};
use crate::optim::Sgd;
use crate::report::{mean_sd, RunReport};
use crate::rng::{stream, streams};
use crate::tensor::Tensor;

/// Number of rows whose true label holds the unique largest logit.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            row.iter().enumerate().all(|(k, &v)| k == y || v < row[y])
        })
        .count()
}

static ACCURACY_CHECKS: AtomicUsize = AtomicUsize::new(0);

/// Number of accuracy evaluations cross-checked in this process so far.
pub fn accuracy_checks() -> usize {
    ACCURACY_CHECKS.load(Ordering::Relaxed)
}

/// Accuracy on one split, computed as `-mean(L_acc)` and cross-checked
/// against [`count_correct`]. A disagreement is reported as an error.
pub fn accuracy(model: &MlpClassifier, data: &LabeledDataset, split: Split) -> Result<f64> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Contract(format!("split {} is empty", split.as_str())));
    }
    let x = data.features().select_rows(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
    let logits = model.classify(&x)?;
    let acc = accuracy_from_logits(&logits, &labels)?;
    let counted = count_correct(&logits, &labels) as f64 / labels.len() as f64;
    if acc != counted {
        return Err(Error::Contract(format!("accuracy {acc} disagrees with argmax count {counted}")));
    }
    ACCURACY_CHECKS.fetch_add(1, Ordering::Relaxed);
    Ok(acc)
}

/// A trained victim and its clean-test accuracy after every epoch.
#[derive(Clone, Debug)]
pub struct VictimRun {
    pub model: MlpClassifier,
    pub curve: Vec<f64>,
}

impl VictimRun {
    pub fn final_accuracy(&self) -> f64 {
        *self.curve.last().expect("at least one epoch")
    }
}

/// Trains a fresh classifier on the train rows of `data` with momentum SGD
/// and records clean-test accuracy per epoch.
pub fn train_victim(data: &LabeledDataset, recipe: &VictimRecipe, loss_c: &LossKind, seed: u64) -> Result<VictimRun> {
    recipe.validate()?;
    if !loss_c.is_victim_loss() {
        return Err(Error::Contract(format!("{} is not a victim loss", loss_c.name())));
    }
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mut model =
        MlpClassifier::new(recipe.dims(data.dim(), data.classes()), recipe.activation, &mut stream(seed, streams::VICTIM_INIT))?;
    let mut rng = stream(seed, streams::VICTIM_BATCHES);
    let mut opt = Sgd::new(recipe.momentum, recipe.weight_decay);
    let mut params = model.params().clone();
    let mut curve = Vec::with_capacity(recipe.epochs);
    let mut step = 0;
    for epoch in 0..recipe.epochs {
        let lr = recipe.lr_at(epoch);
        let mut order = train.clone();
        order.shuffle(&mut rng);
        for idx in order.chunks(recipe.batch_size) {
            let x = data.features().select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let p = victim_loss(&model, None, None, &x, &labels, loss_c, false).map_err(|e| diverged(e, step, &curve))?;
            if !p.value.is_finite() {
                return Err(diverged(Error::Contract(format!("loss {}", p.value)), step, &curve));
            }
            opt.step(&mut params, &p.grad_theta, lr);
            model.set_params(params.clone())?;
            step += 1;
        }
        curve.push(accuracy(&model, data, Split::Test)?);
    }
    Ok(VictimRun { model, curve })
}

fn diverged(e: Error, step: usize, curve: &[f64]) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::Diverged { step, detail: format!("victim training failed ({other}); accuracy so far {curve:?}") },
    }
}

/// `data` with the train rows replaced by their poisoned versions; test and
/// holdout rows stay clean. Also returns the largest `|x' - x|` over the
/// poisoned rows before clamping.
pub fn poison_train_split(
    generator: &PerturbationGenerator,
    data: &LabeledDataset,
    clip_range: Option<(f64, f64)>,
) -> Result<(LabeledDataset, f64)> {
    let idx = data.indices(Split::Train);
    let x = data.features().select_rows(&idx);
    let projected = generator.poisoned_features(&x, None)?;
    let max_pert = x.zip_map(&projected, |a, b| (b - a).abs()).max_abs();
    let poisoned = match clip_range {
        Some((lo, hi)) => projected.map(|v| v.clamp(lo, hi)),
        None => projected,
    };
    let mut features = data.features().clone();
    let n = data.dim();
    for (r, &i) in idx.iter().enumerate() {
        features.data_mut()[i * n..(i + 1) * n].copy_from_slice(poisoned.row(r));
    }
    Ok((data.with_features(features)?, max_pert))
}

/// Clean and poisoned victim accuracy over replicate seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub victim_loss: String,
    pub seeds: Vec<u64>,
    pub clean: Vec<f64>,
    pub poisoned: Vec<f64>,
    pub clean_mean: f64,
    pub clean_sd: f64,
    pub poisoned_mean: f64,
    pub poisoned_sd: f64,
    /// Per seed, accuracy after each poisoned-victim epoch.
    pub poisoned_curves: Vec<Vec<f64>>,
    /// Largest `|x' - x|` over all poisoned rows, before clamping.
    pub max_perturbation: f64,
}

impl EvalReport {
    fn assemble(loss: &LossKind, seeds: &[u64], cells: Vec<(VictimRun, VictimRun)>, max_perturbation: f64) -> Self {
        let clean: Vec<f64> = cells.iter().map(|(c, _)| c.final_accuracy()).collect();
        let poisoned: Vec<f64> = cells.iter().map(|(_, p)| p.final_accuracy()).collect();
        let (clean_mean, clean_sd) = mean_sd(&clean);
        let (poisoned_mean, poisoned_sd) = mean_sd(&poisoned);
        Self {
            victim_loss: loss.name().into(),
            seeds: seeds.to_vec(),
            poisoned_curves: cells.into_iter().map(|(_, p)| p.curve).collect(),
            clean,
            poisoned,
            clean_mean,
            clean_sd,
            poisoned_mean,
            poisoned_sd,
            max_perturbation,
        }
    }

    /// Clean minus poisoned mean accuracy.
    pub fn degradation(&self) -> f64 {
        self.clean_mean - self.poisoned_mean
    }
}

/// Trains a clean and a poisoned victim for every seed. `generator = None`
/// evaluates clean data on both sides.
pub fn evaluate_poison(
    generator: Option<&PerturbationGenerator>,
    data: &LabeledDataset,
    recipe: &VictimRecipe,
    loss_c: &LossKind,
    seeds: &[u64],
    clip_range: Option<(f64, f64)>,
) -> Result<EvalReport> {
    let (poisoned, max_pert) = match generator {
        Some(g) => poison_train_split(g, data, clip_range)?,
        None => (data.clone(), 0.0),
    };
    let cells = seeds
        .par_iter()
        .map(|&s| Ok((train_victim(data, recipe, loss_c, s)?, train_victim(&poisoned, recipe, loss_c, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::assemble(loss_c, seeds, cells, max_pert))
}

/// One replicate of the poisoning experiment.
#[derive(Clone, Debug)]
pub struct PoisonRun {
    pub seed: u64,
    pub generator: PerturbationGenerator,
    pub report: RunReport,
    pub clean: VictimRun,
    pub poisoned: VictimRun,
    pub max_perturbation: f64,
}

/// Outcome of [`poisoning_experiment`].
#[derive(Clone, Debug)]
pub struct PoisoningOutcome {
    pub runs: Vec<PoisonRun>,
    pub eval: EvalReport,
}

fn game_for_seed(game: &GameConfig, seed: u64) -> GameConfig {
    GameConfig { seed, ..game.clone() }
}

fn train_or_fail(cfg: &GameConfig, data: &LabeledDataset) -> Result<(PerturbationGenerator, RunReport)> {
    match train_generator(cfg, data) {
        Ok(t) => Ok((t.generator, t.report)),
        Err(TrainFailure { error, .. }) => Err(error),
    }
}

/// Builds the task of `spec` and checks the clean baseline against the floor.
pub fn prepare(spec: &ExperimentSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    make_synthetic(&spec.dataset)
}

fn check_floor(spec: &ExperimentSpec, clean: &[f64], what: &str) -> Result<()> {
    let (mean, _) = mean_sd(clean);
    if mean < spec.clean_floor {
        return Err(Error::Contract(format!(
            "clean baseline for {what} is {mean:.4}, below the floor {}",
            spec.clean_floor
        )));
    }
    Ok(())
}

/// For each seed: train the generator with that seed, poison the train
/// split, and retrain clean and poisoned victims with the same seed.
pub fn poisoning_experiment(spec: &ExperimentSpec, data: &LabeledDataset) -> Result<PoisoningOutcome> {
    let loss_c = LossKind::Ce;
    let runs = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let cfg = game_for_seed(&spec.game, seed);
            let (generator, report) = train_or_fail(&cfg, data)?;
            let (poisoned, max_perturbation) = poison_train_split(&generator, data, cfg.clip_range)?;
            let clean = train_victim(data, &spec.victim, &loss_c, seed)?;
            let poisoned = train_victim(&poisoned, &spec.victim, &loss_c, seed)?;
            Ok(PoisonRun { seed, generator, report, clean, poisoned, max_perturbation })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_pert = runs.iter().map(|r| r.max_perturbation).fold(0.0, f64::max);
    let cells = runs.iter().map(|r| (r.clean.clone(), r.poisoned.clone())).collect();
    let eval = EvalReport::assemble(&loss_c, &spec.seeds, cells, max_pert);
    check_floor(spec, &eval.clean, "the poisoning experiment")?;
    Ok(PoisoningOutcome { runs, eval })
}

/// A random `fraction` of the train rows (all other rows dropped), in
/// original order. The full fraction returns `data` unchanged.
pub fn train_fraction(data: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let mut train = data.indices(Split::Train);
    let keep = ((fraction * train.len() as f64).round() as usize).max(1);
    train.shuffle(&mut stream(seed, streams::SUBSET));
    let mut idx = train[..keep].to_vec();
    idx.sort_unstable();
    data.select(&idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub fraction: f64,
    pub train_rows: usize,
    pub clean_mean: f64,
    pub poisoned_mean: f64,
    pub poisoned_sd: f64,
    pub degradation: f64,
    pub max_perturbation: f64,
}

/// Generator trained on a fraction of the train split, poisoning all of it.
pub fn ratio_experiment(spec: &ExperimentSpec, data: &LabeledDataset) -> Result<Vec<RatioRow>> {
    let loss_c = LossKind::Ce;
    let clean: Vec<VictimRun> =
        spec.seeds.par_iter().map(|&s| train_victim(data, &spec.victim, &loss_c, s)).collect::<Result<_>>()?;
    let clean_acc: Vec<f64> = clean.iter().map(VictimRun::final_accuracy).collect();
    check_floor(spec, &clean_acc, "the ratio experiment")?;
    let (clean_mean, _) = mean_sd(&clean_acc);
    let cells: Vec<(f64, u64)> =
        spec.fractions.iter().flat_map(|&p| spec.seeds.iter().map(move |&s| (p, s))).collect();
    let results = cells
        .par_iter()
        .map(|&(p, seed)| {
            let subset = train_fraction(data, p, seed)?;
            let cfg = game_for_seed(&spec.game, seed);
            let (generator, _) = train_or_fail(&cfg, &subset)?;
            let (poisoned, max_pert) = poison_train_split(&generator, data, cfg.clip_range)?;
            let run = train_victim(&poisoned, &spec.victim, &loss_c, seed)?;
            Ok((subset.indices(Split::Train).len(), run.final_accuracy(), max_pert))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(spec
        .fractions
        .iter()
        .zip(results.chunks(spec.seeds.len()))
        .map(|(&fraction, chunk)| {
            let acc: Vec<f64> = chunk.iter().map(|c| c.1).collect();
            let (poisoned_mean, poisoned_sd) = mean_sd(&acc);
            RatioRow {
                fraction,
                train_rows: chunk[0].0,
                clean_mean,
                poisoned_mean,
                poisoned_sd,
                degradation: clean_mean - poisoned_mean,
                max_perturbation: chunk.iter().map(|c| c.2).fold(0.0, f64::max),
            }
        })
        .collect())
}

/// One cell of the adversarial grid: a generator trained against a victim
/// at `game_radius`, evaluated on victims adversarially trained at `victim_radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialCell {
    pub game_radius: f64,
    pub victim_radius: f64,
    pub clean_mean: f64,
    pub clean_sd: f64,
    pub poisoned_mean: f64,
    pub poisoned_sd: f64,
    pub degradation: f64,
    pub max_perturbation: f64,
}

fn victim_loss_at(spec: &ExperimentSpec, radius: f64) -> LossKind {
    if radius == 0.0 {
        LossKind::Ce
    } else {
        spec.game.victim_kind_at(spec.victim.adversarial_loss, radius)
    }
}

/// Every (game radius, victim radius) pair of `spec.adv_radii`. The game at
/// radius `r` trains the generator against a TRADES victim at `r`; radius 0
/// is the standard game.
pub fn adversarial_experiment(spec: &ExperimentSpec, data: &LabeledDataset) -> Result<Vec<AdversarialCell>> {
    let radii = &spec.adv_radii;
    let seeds = &spec.seeds;
    let gen_cells: Vec<(f64, u64)> = radii.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let generators = gen_cells
        .par_iter()
        .map(|&(r, seed)| {
            let cfg = GameConfig {
                victim_loss: if r == 0.0 { VictimLoss::Ce } else { VictimLoss::Trades },
                adv_radius: r,
                ..game_for_seed(&spec.game, seed)
            };
            let (g, _) = train_or_fail(&cfg, data)?;
            poison_train_split(&g, data, cfg.clip_range)
        })
        .collect::<Result<Vec<_>>>()?;
    let clean = radii
        .par_iter()
        .flat_map(|&rv| seeds.par_iter().map(move |&s| (rv, s)))
        .map(|(rv, s)| Ok(train_victim(data, &spec.victim, &victim_loss_at(spec, rv), s)?.final_accuracy()))
        .collect::<Result<Vec<f64>>>()?;
    check_floor(spec, &clean[..seeds.len()], "standard training")?;
    let cells: Vec<(usize, usize, usize)> = (0..radii.len())
        .flat_map(|gi| (0..radii.len()).flat_map(move |vi| (0..seeds.len()).map(move |si| (gi, vi, si))))
        .collect();
    let poisoned = cells
        .par_iter()
        .map(|&(gi, vi, si)| {
            let (ref pdata, _) = generators[gi * seeds.len() + si];
            Ok(train_victim(pdata, &spec.victim, &victim_loss_at(spec, radii[vi]), seeds[si])?.final_accuracy())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Vec::new();
    for (gi, &gr) in radii.iter().enumerate() {
        for (vi, &vr) in radii.iter().enumerate() {
            let c = &clean[vi * seeds.len()..][..seeds.len()];
            let p = &poisoned[(gi * radii.len() + vi) * seeds.len()..][..seeds.len()];
            let (clean_mean, clean_sd) = mean_sd(c);
            let (poisoned_mean, poisoned_sd) = mean_sd(p);
            out.push(AdversarialCell {
                game_radius: gr,
                victim_radius: vr,
                clean_mean,
                clean_sd,
                poisoned_mean,
                poisoned_sd,
                degradation: clean_mean - poisoned_mean,
                max_perturbation: generators[gi * seeds.len()..][..seeds.len()].iter().map(|g| g.1).fold(0.0, f64::max),
            });
        }
    }
    Ok(out)
}

/// Gradient cap of the clipped cross-entropy variant.
pub const ABLATION_CLIP: f64 = 10.0;

/// Solver traces of three otherwise identical runs.
#[derive(Clone, Debug)]
pub struct AblationTraces {
    pub ce: RunReport,
    pub ce_clip: RunReport,
    pub sur: RunReport,
}

impl AblationTraces {
    pub fn named(&self) -> [(&'static str, &RunReport); 3] {
        [("ce", &self.ce), ("ce_clip", &self.ce_clip), ("sur", &self.sur)]
    }
}

/// Runs the game with the attacker loss set to CE, CE with the attacker
/// gradient capped at [`ABLATION_CLIP`], and SUR. Diverging runs keep the
/// trace recorded up to the failure.
pub fn ablation_diagnostic(data: &LabeledDataset, game: &GameConfig) -> Result<AblationTraces> {
    let variants = [
        GameConfig { attacker_loss: AttackerLoss::Ce, grad_clip: None, ..game.clone() },
        GameConfig { attacker_loss: AttackerLoss::Ce, grad_clip: Some(ABLATION_CLIP), ..game.clone() },
        GameConfig { attacker_loss: AttackerLoss::Sur, grad_clip: None, ..game.clone() },
    ];
    let mut reports = variants
        .par_iter()
        .map(|cfg| match train_generator(cfg, data) {
            Ok(t) => Ok(t.report),
            Err(TrainFailure { error, report }) if error.is_numerical() => Ok(report),
            Err(TrainFailure { error, .. }) => Err(error),
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || reports.next().expect("three variants");
    Ok(AblationTraces { ce: next(), ce_clip: next(), sur: next() })
}
