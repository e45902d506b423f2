//! JSON-facing configuration: one game instance, a victim training recipe,
//! and a full experiment.
//!
//! Parsing goes through `serde_path_to_error`, so a bad or missing field is
//! reported with its dotted path. Every loader validates before returning.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bome::{BomeConfig, InnerOptimizer};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{LossKind, PgdConfig, PgdStart, TRADES_START};
use crate::nn::Activation;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VictimLoss {
    #[default]
    Ce,
    Adv,
    Trades,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackerLoss {
    #[default]
    Sur,
    Ce,
    Cw,
    Acc,
}

/// Which clean samples enter the attacker payoff at each solver step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CleanBatch {
    /// The clean version of the current mini-batch.
    #[default]
    Same,
    /// An independently drawn mini-batch of the training split.
    Disjoint,
}

fn d_pgd_steps() -> usize {
    10
}
fn d_inner_steps() -> usize {
    10
}
fn d_inner_step_size() -> f64 {
    1e-3
}
fn d_theta_lr() -> f64 {
    0.01
}
fn d_w_lr() -> f64 {
    0.1
}
fn d_rho() -> f64 {
    1.5
}
fn d_trades_lambda() -> f64 {
    1.0
}
fn d_epochs() -> usize {
    10
}
fn d_batch() -> usize {
    64
}
fn d_classifier_hidden() -> Vec<usize> {
    vec![32]
}
fn d_generator_encoder() -> Vec<usize> {
    vec![32, 16]
}
fn d_generator_decoder() -> Vec<usize> {
    vec![32]
}

/// Every hyperparameter of one game instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    /// Poison radius in the max norm, in feature units.
    pub budget: f64,
    #[serde(default)]
    pub clip_range: Option<(f64, f64)>,
    #[serde(default)]
    pub victim_loss: VictimLoss,
    #[serde(default)]
    pub attacker_loss: AttackerLoss,
    /// Adversarial-training radius for ADV and TRADES.
    #[serde(default)]
    pub adv_radius: f64,
    #[serde(default = "d_trades_lambda")]
    pub trades_lambda: f64,
    #[serde(default = "d_pgd_steps")]
    pub pgd_steps: usize,
    /// Defaults to a quarter of the radius.
    #[serde(default)]
    pub pgd_step_size: Option<f64>,
    #[serde(default = "d_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "d_inner_step_size")]
    pub inner_step_size: f64,
    #[serde(default)]
    pub inner_optimizer: InnerOptimizer,
    #[serde(default = "d_theta_lr")]
    pub theta_lr: f64,
    #[serde(default = "d_w_lr")]
    pub w_lr: f64,
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Best-response tolerance. Recorded in reports; the solver never reads it.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Caps the attacker-gradient norm in the classifier update.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub clean_batch: CleanBatch,
    #[serde(default = "d_classifier_hidden")]
    pub classifier_hidden: Vec<usize>,
    /// Hidden widths from the input to the bottleneck (inclusive).
    #[serde(default = "d_generator_encoder")]
    pub generator_encoder: Vec<usize>,
    /// Hidden widths after the bottleneck.
    #[serde(default = "d_generator_decoder")]
    pub generator_decoder: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl GameConfig {
    /// Defaults everywhere except the budget.
    pub fn with_budget(budget: f64) -> Self {
        parse_json(&format!("{{\"budget\": {budget:?}}}")).expect("default game config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        positive("budget", self.budget)?;
        if let Some((lo, hi)) = self.clip_range {
            if !(lo < hi) {
                return Err(Error::config("clip_range", format!("need lo < hi, got ({lo}, {hi})")));
            }
        }
        if !(self.adv_radius >= 0.0 && self.adv_radius.is_finite()) {
            return Err(Error::config("adv_radius", format!("must be non-negative, got {}", self.adv_radius)));
        }
        positive("trades_lambda", self.trades_lambda)?;
        if self.pgd_steps == 0 {
            return Err(Error::config("pgd_steps", "must be at least 1"));
        }
        if let Some(s) = self.pgd_step_size {
            positive("pgd_step_size", s)?;
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0) {
                return Err(Error::config("eta", format!("must be non-negative, got {eta}")));
            }
        }
        widths("classifier_hidden", &self.classifier_hidden, false)?;
        widths("generator_encoder", &self.generator_encoder, true)?;
        widths("generator_decoder", &self.generator_decoder, false)?;
        self.bome().validate()
    }

    pub fn bome(&self) -> BomeConfig {
        BomeConfig {
            inner_steps: self.inner_steps,
            inner_step_size: self.inner_step_size,
            inner_optimizer: self.inner_optimizer,
            theta_step: self.theta_lr,
            w_step: self.w_lr,
            rho: self.rho,
            grad_clip: self.grad_clip,
        }
    }

    pub fn pgd(&self, start: PgdStart) -> PgdConfig {
        PgdConfig { steps: self.pgd_steps, step_size: self.pgd_step_size, start }
    }

    /// The victim loss at this game's adversarial radius.
    pub fn victim_kind(&self) -> LossKind {
        self.victim_kind_at(self.victim_loss, self.adv_radius)
    }

    pub fn victim_kind_at(&self, loss: VictimLoss, radius: f64) -> LossKind {
        match loss {
            VictimLoss::Ce => LossKind::Ce,
            VictimLoss::Adv => LossKind::Adv { radius, pgd: self.pgd(PgdStart::Clean) },
            VictimLoss::Trades => LossKind::Trades { radius, lambda: self.trades_lambda, pgd: self.pgd(TRADES_START) },
        }
    }

    pub fn attacker_kind(&self) -> LossKind {
        match self.attacker_loss {
            AttackerLoss::Sur => LossKind::Sur,
            AttackerLoss::Ce => LossKind::Ce,
            AttackerLoss::Cw => LossKind::Cw,
            AttackerLoss::Acc => LossKind::Acc,
        }
    }

    pub fn classifier_dims(&self, features: usize, classes: usize) -> Vec<usize> {
        std::iter::once(features).chain(self.classifier_hidden.iter().copied()).chain([classes]).collect()
    }

    /// Encoder and decoder widths for inputs of width `features`.
    pub fn generator_dims(&self, features: usize) -> (Vec<usize>, Vec<usize>) {
        let encoder: Vec<usize> = std::iter::once(features).chain(self.generator_encoder.iter().copied()).collect();
        let bottleneck = *encoder.last().expect("non-empty");
        let decoder = std::iter::once(bottleneck)
            .chain(self.generator_decoder.iter().copied())
            .chain([features])
            .collect();
        (encoder, decoder)
    }
}

fn d_victim_epochs() -> usize {
    30
}
fn d_victim_lr() -> f64 {
    0.05
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    5e-4
}
fn d_victim_batch() -> usize {
    32
}
fn d_milestones() -> Vec<f64> {
    vec![0.75, 0.9]
}
fn d_decay() -> f64 {
    0.1
}

/// How a victim is trained from scratch on a (possibly poisoned) train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimRecipe {
    #[serde(default = "d_victim_epochs")]
    pub epochs: usize,
    #[serde(default = "d_victim_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_victim_batch")]
    pub batch_size: usize,
    #[serde(default = "d_classifier_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Fractions of `epochs` after which the step size is multiplied by `decay`.
    #[serde(default = "d_milestones")]
    pub milestones: Vec<f64>,
    #[serde(default = "d_decay")]
    pub decay: f64,
    /// Victim loss used for adversarial training in the adversarial scenario.
    #[serde(default = "d_adv_victim")]
    pub adversarial_loss: VictimLoss,
}

fn d_adv_victim() -> VictimLoss {
    VictimLoss::Adv
}

impl Default for VictimRecipe {
    fn default() -> Self {
        parse_json("{}").expect("default recipe is valid")
    }
}

impl VictimRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("victim.epochs", "must be at least 1"));
        }
        positive("victim.lr", self.lr)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("victim.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("victim.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("victim.batch_size", "must be at least 1"));
        }
        widths("victim.hidden", &self.hidden, false)?;
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("victim.milestones", "fractions must lie in [0, 1]"));
        }
        positive("victim.decay", self.decay)?;
        if self.adversarial_loss == VictimLoss::Ce {
            return Err(Error::config("victim.adversarial_loss", "must be adv or trades"));
        }
        Ok(())
    }

    /// Step size for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).ceil() as usize)
            .count();
        self.lr * self.decay.powi(passed as i32)
    }

    pub fn dims(&self, features: usize, classes: usize) -> Vec<usize> {
        std::iter::once(features).chain(self.hidden.iter().copied()).chain([classes]).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    #[default]
    Standard,
    Adversarial,
}

fn d_fractions() -> Vec<f64> {
    vec![1.0]
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn d_clean_floor() -> f64 {
    0.9
}

/// A full experiment: task, game, victim recipe and replicate seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub scenario: Scenario,
    pub dataset: SyntheticSpec,
    pub game: GameConfig,
    #[serde(default)]
    pub victim: VictimRecipe,
    /// Training fractions for the generalization table, ascending.
    #[serde(default = "d_fractions")]
    pub fractions: Vec<f64>,
    /// Adversarial-training radii; must include 0 in the adversarial scenario.
    #[serde(default)]
    pub adv_radii: Vec<f64>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Minimum clean-trained accuracy before poison results are reported.
    #[serde(default = "d_clean_floor")]
    pub clean_floor: f64,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = parse_json(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.game.validate().map_err(|e| prefix("game", e))?;
        self.victim.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one replicate seed"));
        }
        if self.fractions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::config("fractions", "every fraction must lie in (0, 1]"));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("fractions", "must be strictly ascending"));
        }
        if self.adv_radii.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::config("adv_radii", "radii must be non-negative"));
        }
        if self.scenario == Scenario::Adversarial && !self.adv_radii.contains(&0.0) {
            return Err(Error::config("adv_radii", "the adversarial grid must include 0"));
        }
        if !(0.0..=1.0).contains(&self.clean_floor) {
            return Err(Error::config("clean_floor", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn prefix(head: &str, e: Error) -> Error {
    match e {
        Error::Config { path, detail } => Error::config(format!("{head}.{path}"), detail),
        other => other,
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be positive and finite, got {v}")))
    }
}

fn widths(path: &str, w: &[usize], non_empty: bool) -> Result<()> {
    if non_empty && w.is_empty() {
        return Err(Error::config(path, "needs at least one width"));
    }
    if w.contains(&0) {
        return Err(Error::config(path, "widths must be positive"));
    }
    Ok(())
}

/// Deserializes JSON, reporting the failing field path on error.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })
}

/// Reads and parses a JSON file; I/O failures are reported as configuration errors.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    parse_json(&text)
}
