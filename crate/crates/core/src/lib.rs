//! A desk-scale laboratory for unlearnable-example poisoning posed as a
//! leader-follower game between a perturbation generator and a classifier.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`params`], [`nn`], [`checkpoint`]: parameter vectors, the MLP classifier,
//!   the budgeted encoder-decoder generator, and their on-disk format.
//! - [`losses`]: cross-entropy, the bounded surrogate, Carlini-Wagner, the
//!   discrete accuracy loss, PGD, adversarial and TRADES losses, and the payoffs.
//! - [`bome`]: the first-order value-function bilevel solver with the dynamic
//!   barrier update, generic over a [`bome::BilevelProblem`].
//! - [`game`]: the poisoning game as a bilevel problem and generator training.
//! - [`data`], [`lab`]: synthetic tasks, victim retraining and the experiment suite.

// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bome;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod game;
pub mod gradcheck;
pub mod lab;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod tensor;

pub use autodiff::{Bindings, Evaluation, GradientMap, Graph, NodeId};
pub use config::{ExperimentSpec, GameConfig, VictimRecipe};
pub use data::{make_synthetic, LabeledDataset, Split, SyntheticKind, SyntheticSpec};
pub use error::{Error, Result};
pub use losses::LossKind;
pub use nn::{Activation, MlpClassifier, PerturbationGenerator};
pub use params::ParamVector;
pub use report::RunReport;
pub use tensor::Tensor;

/// Version string echoed into every output summary.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
