//! Desk-scale models with hand-written gradients.
//!
//! Two model kinds cover the two example families:
//!
//! - `SharedLinear`: a single parameter vector `theta` fit by squared error
//!   `(theta . x - y)^2` across all domains.
//! - `ByteLm`: a one-hidden-layer next-byte predictor
//!   `logits = W2 tanh(W1 [emb(b_1) .. emb(b_c)] + b1) + b2`
//!   trained by cross-entropy over the 256 byte values.
//!
//! Parameters live in one flat `Vec<f64>` so optimizers, finite-difference
//! checks, and serialization all see the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{ProbVector, WeightVector};
use crate::data::{ExampleRef, MultiDomainDataset};
use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

/// Architecture of a model; parameter layout is a pure function of this.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSpec {
    SharedLinear { dim: usize },
    ByteLm { context: usize, embed: usize, hidden: usize },
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::SharedLinear { dim } => dim,
            ModelSpec::ByteLm { context, embed, hidden } => {
                BYTE_VOCAB * embed            // embedding table
                    + hidden * (context * embed) // W1
                    + hidden                  // b1
                    + BYTE_VOCAB * hidden     // W2
                    + BYTE_VOCAB              // b2
            }
        }
    }
}

/// A model: spec plus flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<f64>,
}

// Offsets into the flat ByteLm parameter vector.
struct ByteLmLayout {
    context: usize,
    embed: usize,
    hidden: usize,
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl ByteLmLayout {
    fn of(spec: &ModelSpec) -> ByteLmLayout {
        let ModelSpec::ByteLm { context, embed, hidden } = *spec else {
            panic!("not a byte LM")
        };
        let emb = 0;
        let w1 = emb + BYTE_VOCAB * embed;
        let b1 = w1 + hidden * context * embed;
        let w2 = b1 + hidden;
        let b2 = w2 + BYTE_VOCAB * hidden;
        ByteLmLayout { context, embed, hidden, emb, w1, b1, w2, b2 }
    }
}

impl Model {
    /// A shared linear model initialized at the origin.
    pub fn shared_linear(dim: usize) -> Model {
        Model {
            spec: ModelSpec::SharedLinear { dim },
            params: vec![0.0; dim],
        }
    }

    /// A byte LM with small random embeddings and hidden weights and a zero
    /// output layer, so the initial prediction is the uniform distribution
    /// (loss `ln 256` everywhere).
    pub fn byte_lm(context: usize, embed: usize, hidden: usize, rng: &mut impl Rng) -> Model {
        let spec = ModelSpec::ByteLm { context, embed, hidden };
        let layout = ByteLmLayout::of(&spec);
        let mut params = vec![0.0; spec.param_count()];
        let emb_scale = 0.5;
        for p in params[layout.emb..layout.w1].iter_mut() {
            *p = (rng.random::<f64>() - 0.5) * 2.0 * emb_scale;
        }
        let w1_scale = 1.0 / ((context * embed) as f64).sqrt();
        for p in params[layout.w1..layout.b1].iter_mut() {
            *p = (rng.random::<f64>() - 0.5) * 2.0 * w1_scale;
        }
        // b1, W2, b2 stay zero.
        Model { spec, params }
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Model> {
        if params.len() != spec.param_count() {
            return Err(Error::invalid("parameter vector does not match spec"));
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Loss of a single example (weight 1).
    pub fn loss(&self, example: ExampleRef<'_>) -> f64 {
        match (&self.spec, example) {
            (ModelSpec::SharedLinear { dim }, ExampleRef::Regression { x, y }) => {
                debug_assert_eq!(x.len(), *dim);
                let r = dot(&self.params, x) - y;
                r * r
            }
            (ModelSpec::ByteLm { .. }, ExampleRef::NextByte { context, next }) => {
                let layout = ByteLmLayout::of(&self.spec);
                let (_, _, log_probs) = self.byte_lm_forward(&layout, context);
                -log_probs[next as usize]
            }
            _ => panic!("example kind does not match model kind"),
        }
    }

    /// Weighted loss and gradient accumulation: adds `weight * grad L(x)`
    /// into `grad_acc` and returns `weight * L(x)`.
    pub fn accumulate_loss_and_grad(
        &self,
        example: ExampleRef<'_>,
        weight: f64,
        grad_acc: &mut [f64],
    ) -> f64 {
        debug_assert_eq!(grad_acc.len(), self.params.len());
        match (&self.spec, example) {
            (ModelSpec::SharedLinear { dim }, ExampleRef::Regression { x, y }) => {
                debug_assert_eq!(x.len(), *dim);
                let r = dot(&self.params, x) - y;
                let coeff = weight * 2.0 * r;
                for (g, &xi) in grad_acc.iter_mut().zip(x) {
                    *g += coeff * xi;
                }
                weight * r * r
            }
            (ModelSpec::ByteLm { .. }, ExampleRef::NextByte { context, next }) => {
                let layout = ByteLmLayout::of(&self.spec);
                let (input, hidden_act, log_probs) = self.byte_lm_forward(&layout, context);
                let loss = -log_probs[next as usize];
                let in_dim = layout.context * layout.embed;

                // dL/dz_b = p_b - 1[b = next], scaled by the example weight.
                let mut da = vec![0.0; layout.hidden];
                for b in 0..BYTE_VOCAB {
                    let mut gz = log_probs[b].exp();
                    if b == next as usize {
                        gz -= 1.0;
                    }
                    gz *= weight;
                    if gz == 0.0 {
                        continue;
                    }
                    let row = layout.w2 + b * layout.hidden;
                    for h in 0..layout.hidden {
                        grad_acc[row + h] += gz * hidden_act[h];
                        da[h] += gz * self.params[row + h];
                    }
                    grad_acc[layout.b2 + b] += gz;
                }

                // Hidden layer through tanh: a = tanh(W1 u + b1).
                let mut dinput = vec![0.0; in_dim];
                for h in 0..layout.hidden {
                    let dpre = da[h] * (1.0 - hidden_act[h] * hidden_act[h]);
                    if dpre == 0.0 {
                        continue;
                    }
                    let row = layout.w1 + h * in_dim;
                    for j in 0..in_dim {
                        grad_acc[row + j] += dpre * input[j];
                        dinput[j] += dpre * self.params[row + j];
                    }
                    grad_acc[layout.b1 + h] += dpre;
                }

                // Embeddings: input slot (pos, e) came from emb[context[pos]].
                for (pos, &byte) in context.iter().enumerate() {
                    let emb_row = layout.emb + byte as usize * layout.embed;
                    for e in 0..layout.embed {
                        grad_acc[emb_row + e] += dinput[pos * layout.embed + e];
                    }
                }
                weight * loss
            }
            _ => panic!("example kind does not match model kind"),
        }
    }

    fn byte_lm_forward(
        &self,
        layout: &ByteLmLayout,
        context: &[u8],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        debug_assert_eq!(context.len(), layout.context);
        let in_dim = layout.context * layout.embed;
        let mut input = Vec::with_capacity(in_dim);
        for &byte in context {
            let row = layout.emb + byte as usize * layout.embed;
            input.extend_from_slice(&self.params[row..row + layout.embed]);
        }
        let mut hidden_act = Vec::with_capacity(layout.hidden);
        for h in 0..layout.hidden {
            let row = layout.w1 + h * in_dim;
            let pre = dot(&self.params[row..row + in_dim], &input) + self.params[layout.b1 + h];
            hidden_act.push(pre.tanh());
        }
        let mut logits = Vec::with_capacity(BYTE_VOCAB);
        for b in 0..BYTE_VOCAB {
            let row = layout.w2 + b * layout.hidden;
            logits.push(
                dot(&self.params[row..row + layout.hidden], &hidden_act)
                    + self.params[layout.b2 + b],
            );
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        let log_probs = logits.into_iter().map(|z| z - log_norm).collect();
        (input, hidden_act, log_probs)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Loss and gradient of one weighted example: `(w L(x), w grad L(x))`.
pub fn example_loss_and_grad(
    model: &Model,
    example: ExampleRef<'_>,
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if !model.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut grad = vec![0.0; model.param_count()];
    let loss = model.accumulate_loss_and_grad(example, weight, &mut grad);
    Ok((loss, grad))
}

/// The exact population gradient of the mixture objective
/// `sum_i probs_i * weights_i * mean_{x in D_i} L(x)` over the train split.
///
/// With `probs = p(.; tau)` and unit weights this is the temperature-sampled
/// objective; with proportional probs and the equivalent weights it is the
/// scalarized one. The two agree for every temperature.
pub fn full_gradient(
    model: &Model,
    data: &MultiDomainDataset,
    probs: &ProbVector,
    weights: &WeightVector,
) -> Result<Vec<f64>> {
    if probs.len() != data.num_domains() || weights.len() != data.num_domains() {
        return Err(Error::invalid("probability/weight length must match domains"));
    }
    let p_count = model.param_count();
    let mut total = vec![0.0; p_count];
    let mut domain_grad = vec![0.0; p_count];
    for (i, domain) in data.domains().iter().enumerate() {
        let scale = probs.get(i) * weights.get(i);
        if scale == 0.0 {
            continue;
        }
        domain_grad.iter_mut().for_each(|g| *g = 0.0);
        let n = domain.train.len();
        for j in 0..n {
            model.accumulate_loss_and_grad(domain.train.example(j), 1.0, &mut domain_grad);
        }
        let coeff = scale / n as f64;
        for (t, g) in total.iter_mut().zip(&domain_grad) {
            *t += coeff * g;
        }
    }
    Ok(total)
}

/// Mean per-example loss on each domain's full validation split.
pub fn evaluate(model: &Model, data: &MultiDomainDataset) -> Vec<f64> {
    data.domains()
        .iter()
        .map(|d| {
            let n = d.valid.len();
            let mut acc = 0.0;
            for i in 0..n {
                acc += model.loss(d.valid.example(i));
            }
            acc / n as f64
        })
        .collect()
}

/// Mean loss over a fixed prefix of each domain's train split (capped at
/// `cap` examples) for cheap train-loss logging.
pub fn evaluate_train_prefix(model: &Model, data: &MultiDomainDataset, cap: usize) -> Vec<f64> {
    data.domains()
        .iter()
        .map(|d| {
            let n = d.train.len().min(cap);
            let mut acc = 0.0;
            for i in 0..n {
                acc += model.loss(d.train.example(i));
            }
            acc / n as f64
        })
        .collect()
}
