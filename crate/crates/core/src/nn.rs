//! The two players' models: an MLP classifier and a budgeted encoder-decoder
//! perturbation generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::project_linf;
use crate::params::ParamVector;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Number of scalars in a dense stack with the given widths.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Weight and bias shapes of a dense stack, layer by layer.
pub fn layer_shapes(dims: &[usize]) -> Vec<Vec<usize>> {
    dims.windows(2).flat_map(|w| [vec![w[0], w[1]], vec![w[1]]]).collect()
}

/// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
fn init_uniform(dims: &[usize], rng: &mut impl Rng) -> ParamVector {
    let mut tensors = Vec::with_capacity(2 * dims.len());
    for w in dims.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        let weights = (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
        let bias = (0..w[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
        tensors.push(Tensor::matrix(w[0], w[1], weights));
        tensors.push(Tensor::vector(bias));
    }
    ParamVector::new(tensors)
}

fn check_params(dims: &[usize], params: &ParamVector) -> Result<()> {
    if params.shapes() != layer_shapes(dims) {
        return Err(Error::Contract(format!(
            "parameter shapes {:?} do not match layer widths {dims:?}",
            params.shapes()
        )));
    }
    Ok(())
}

fn check_dims(dims: &[usize], what: &str) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Contract(format!("{what} needs at least two positive widths, got {dims:?}")));
    }
    Ok(())
}

/// Appends a dense stack to `graph`: affine layers with `activation` between
/// them and no activation after the last one.
pub fn dense_stack(graph: &mut Graph, x: NodeId, ids: &[NodeId], activation: Activation) -> NodeId {
    let layers = ids.len() / 2;
    let mut h = x;
    for (i, pair) in ids.chunks(2).enumerate() {
        let z = graph.matmul(h, pair[0]);
        h = graph.add_bias(z, pair[1]);
        if i + 1 < layers {
            h = match activation {
                Activation::Relu => graph.relu(h),
                Activation::Tanh => graph.tanh(h),
            };
        }
    }
    h
}

fn check_batch(x: &Tensor, n: usize) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != n {
        return Err(Error::Contract(format!("expected a batch with {n} columns, got shape {:?}", x.shape())));
    }
    Ok(())
}

/// Feed-forward classifier `f_theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    layer_dims: Vec<usize>,
    activation: Activation,
    params: ParamVector,
}

impl MlpClassifier {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        check_dims(&layer_dims, "classifier")?;
        let params = init_uniform(&layer_dims, rng);
        Ok(Self { layer_dims, activation, params })
    }

    pub fn with_params(layer_dims: Vec<usize>, activation: Activation, params: ParamVector) -> Result<Self> {
        check_dims(&layer_dims, "classifier")?;
        check_params(&layer_dims, &params)?;
        Ok(Self { layer_dims, activation, params })
    }

    pub fn zeros(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        check_dims(&layer_dims, "classifier")?;
        let shapes = layer_shapes(&layer_dims);
        let params = ParamVector::new(shapes.iter().map(|s| Tensor::zeros(s)).collect());
        Ok(Self { layer_dims, activation, params })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        check_params(&self.layer_dims, &params)?;
        self.params = params;
        Ok(())
    }

    /// Appends the logits computation for input node `x`.
    pub fn build_logits(&self, graph: &mut Graph, x: NodeId, ids: &[NodeId]) -> NodeId {
        dense_stack(graph, x, ids, self.activation)
    }

    /// Logits (`batch x K`) for a batch of inputs.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        check_batch(x, self.input_dim())?;
        let mut g = Graph::new();
        let xid = g.input("x");
        let ids = self.params.register(&mut g, "theta");
        let logits = self.build_logits(&mut g, xid, &ids);
        let mut b = Bindings::new().with(xid, x.clone());
        self.params.bind(&mut b, &ids);
        Ok(g.forward(&b)?.value(logits).clone())
    }
}

/// Encoder-decoder perturbation generator `g_w` with an `eps * tanh` head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationGenerator {
    encoder_dims: Vec<usize>,
    decoder_dims: Vec<usize>,
    activation: Activation,
    budget: f64,
    params: ParamVector,
}

impl PerturbationGenerator {
    /// `encoder_dims` runs from the input width to the bottleneck and
    /// `decoder_dims` from the bottleneck back to the input width.
    pub fn new(
        encoder_dims: Vec<usize>,
        decoder_dims: Vec<usize>,
        activation: Activation,
        budget: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dims = Self::validate(&encoder_dims, &decoder_dims, budget)?;
        let params = init_uniform(&dims, rng);
        Ok(Self { encoder_dims, decoder_dims, activation, budget, params })
    }

    pub fn with_params(
        encoder_dims: Vec<usize>,
        decoder_dims: Vec<usize>,
        activation: Activation,
        budget: f64,
        params: ParamVector,
    ) -> Result<Self> {
        let dims = Self::validate(&encoder_dims, &decoder_dims, budget)?;
        check_params(&dims, &params)?;
        Ok(Self { encoder_dims, decoder_dims, activation, budget, params })
    }

    /// A generator whose parameters are all zero; it outputs `delta = 0`.
    pub fn zeros(encoder_dims: Vec<usize>, decoder_dims: Vec<usize>, activation: Activation, budget: f64) -> Result<Self> {
        let dims = Self::validate(&encoder_dims, &decoder_dims, budget)?;
        let params = ParamVector::new(layer_shapes(&dims).iter().map(|s| Tensor::zeros(s)).collect());
        Ok(Self { encoder_dims, decoder_dims, activation, budget, params })
    }

    fn validate(encoder: &[usize], decoder: &[usize], budget: f64) -> Result<Vec<usize>> {
        check_dims(encoder, "encoder")?;
        check_dims(decoder, "decoder")?;
        if encoder.last() != decoder.first() {
            return Err(Error::Contract(format!("bottleneck mismatch: encoder {encoder:?}, decoder {decoder:?}")));
        }
        if encoder.first() != decoder.last() {
            return Err(Error::Contract("generator output width must equal its input width".into()));
        }
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(Error::Contract(format!("budget must be positive, got {budget}")));
        }
        Ok(encoder.iter().chain(&decoder[1..]).copied().collect())
    }

    /// Widths of the whole stack, input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        self.encoder_dims.iter().chain(&self.decoder_dims[1..]).copied().collect()
    }

    pub fn encoder_dims(&self) -> &[usize] {
        &self.encoder_dims
    }

    pub fn decoder_dims(&self) -> &[usize] {
        &self.decoder_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_dims[0]
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        check_params(&self.layer_dims(), &params)?;
        self.params = params;
        Ok(())
    }

    /// Appends `delta = eps * tanh(stack(x))` for input node `x`.
    pub fn build_perturbation(&self, graph: &mut Graph, x: NodeId, ids: &[NodeId]) -> NodeId {
        let pre = dense_stack(graph, x, ids, self.activation);
        let squashed = graph.tanh(pre);
        graph.scale(squashed, self.budget)
    }

    /// Sample-wise perturbations, each row bounded by the budget in the max norm.
    pub fn perturb(&self, x: &Tensor) -> Result<Tensor> {
        check_batch(x, self.input_dim())?;
        let mut g = Graph::new();
        let xid = g.input("x");
        let ids = self.params.register(&mut g, "w");
        let delta = self.build_perturbation(&mut g, xid, &ids);
        let mut b = Bindings::new().with(xid, x.clone());
        self.params.bind(&mut b, &ids);
        // |tanh| <= 1 in floating point, so |eps * tanh| <= eps holds exactly.
        Ok(g.forward(&b)?.value(delta).clone())
    }

    /// `x + g_w(x)` for a batch, projected so that every computed
    /// `|x' - x|` stays within the budget, then clamped to `clip_range`.
    pub fn poisoned_features(&self, x: &Tensor, clip_range: Option<(f64, f64)>) -> Result<Tensor> {
        let delta = self.perturb(x)?;
        let eps = self.budget;
        Ok(x.zip_map(&delta, |a, d| {
            let p = project_linf(a, a + d, eps);
            match clip_range {
                Some((lo, hi)) => p.clamp(lo, hi),
                None => p,
            }
        }))
    }

    /// `x' = clip(x + g_w(x))` for every row; labels and the input are untouched.
    pub fn poison(&self, dataset: &LabeledDataset, clip_range: Option<(f64, f64)>) -> Result<LabeledDataset> {
        dataset.with_features(self.poisoned_features(dataset.features(), clip_range)?)
    }
}
