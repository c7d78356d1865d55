//! Per-factor relevance heads and entropy-weighted fusion of their logits.
//!
//! Each head scores a case pair from one factor. A head whose softmax output
//! has low entropy is confident, so heads are weighted by
//! `softmax(1 / (H_k + ε))`. The weights are computed from forward values and
//! enter the tape as constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::MATCH_LEVELS;
use crate::encoder::Linear;
use crate::error::{Error, Result};
use crate::lfdr::DisentangledVars;
use crate::params::ParamStore;
use crate::tensor::{entropy, softmax, LOG_CLAMP};

pub const MATCH_PREFIX: &str = "match";
/// Floor added to each entropy before taking its reciprocal.
pub const ENTROPY_EPS: f64 = 1e-8;
pub const N_HEADS: usize = 4;

/// `[f_s; f_t; f_s + f_t; f_s ⊙ f_t]`.
pub fn pair_features(source: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if source.len() != target.len() {
        return Err(Error::Invalid(format!("factor dimensions differ: {} vs {}", source.len(), target.len())));
    }
    let mut out = Vec::with_capacity(4 * source.len());
    out.extend_from_slice(source);
    out.extend_from_slice(target);
    out.extend(source.iter().zip(target).map(|(a, b)| a + b));
    out.extend(source.iter().zip(target).map(|(a, b)| a * b));
    Ok(out)
}

/// Tape version of [`pair_features`].
pub fn pair_features_graph(g: &mut Graph, source: Var, target: Var) -> Var {
    let sum = g.add(source, target);
    let prod = g.mul(source, target);
    g.concat_cols(&[source, target, sum, prod])
}

/// Four affine relevance heads: head 0 reads the shared factor, heads 1–3
/// the exclusive article/charge/term factors.
#[derive(Clone, Debug)]
pub struct MatchHeads {
    heads: [Linear; N_HEADS],
}

impl MatchHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let heads = [0, 1, 2, 3].map(|k| Linear::new(store, &format!("{MATCH_PREFIX}{k}"), 4 * d, MATCH_LEVELS, rng));
        Self { heads }
    }

    pub fn head(&self, k: usize) -> &Linear {
        &self.heads[k]
    }

    /// Pre-softmax logits `z_0..z_3`, each `(1, |Y|)`.
    pub fn logits(&self, g: &mut Graph, source: &DisentangledVars, target: &DisentangledVars) -> [Var; N_HEADS] {
        let inputs = [
            (source.shared, target.shared),
            (source.exclusive[0], target.exclusive[0]),
            (source.exclusive[1], target.exclusive[1]),
            (source.exclusive[2], target.exclusive[2]),
        ];
        [0, 1, 2, 3].map(|k| {
            let x = pair_features_graph(g, inputs[k].0, inputs[k].1);
            self.heads[k].forward(g, x)
        })
    }
}

/// How head logits are combined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Softmax over reciprocal entropies.
    Entropy,
    /// Every head weighted ¼.
    Uniform,
    /// Caller-supplied weights.
    Fixed([f64; N_HEADS]),
}

/// Entropies (nats) of each head's softmax and the derived weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub entropies: [f64; N_HEADS],
    pub weights: [f64; N_HEADS],
}

/// `w = softmax([1/(H_0+ε), …, 1/(H_3+ε)])`.
pub fn entropy_weights(logits: &[Vec<f64>; N_HEADS]) -> FusionWeights {
    let entropies = [0, 1, 2, 3].map(|k| entropy(&softmax(&logits[k])));
    let recip: Vec<f64> = entropies.iter().map(|h| 1.0 / (h + ENTROPY_EPS)).collect();
    let w = softmax(&recip);
    FusionWeights { entropies, weights: [w[0], w[1], w[2], w[3]] }
}

pub fn fusion_weights(logits: &[Vec<f64>; N_HEADS], mode: FusionMode) -> FusionWeights {
    let fw = entropy_weights(logits);
    match mode {
        FusionMode::Entropy => fw,
        FusionMode::Uniform => FusionWeights { weights: [0.25; N_HEADS], ..fw },
        FusionMode::Fixed(weights) => FusionWeights { weights, ..fw },
    }
}

/// Everything the fusion step produced for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    pub logits: [Vec<f64>; N_HEADS],
    pub entropies: [f64; N_HEADS],
    pub weights: [f64; N_HEADS],
    pub fused: Vec<f64>,
}

impl FusionResult {
    pub fn prediction(&self) -> usize {
        crate::tensor::argmax(&self.fused)
    }
}

/// `z = Σ_k w_k z_k`.
pub fn fuse(logits: &[Vec<f64>; N_HEADS], weights: &[f64; N_HEADS]) -> Vec<f64> {
    let mut z = vec![0.0; logits[0].len()];
    for (zk, &wk) in logits.iter().zip(weights) {
        for (o, v) in z.iter_mut().zip(zk) {
            *o += wk * v;
        }
    }
    z
}

/// `−log softmax(z)[label]`.
pub fn match_loss(fused: &[f64], label: usize) -> f64 {
    -softmax(fused)[label].max(LOG_CLAMP).ln()
}

/// Tape version: returns `(z_fused, L_mat)` with `weights` held constant.
pub fn fuse_and_loss(g: &mut Graph, logits: [Var; N_HEADS], weights: &[f64; N_HEADS], label: usize) -> (Var, Var) {
    let scaled: Vec<Var> = logits.iter().zip(weights).map(|(&z, &w)| g.scale(z, w)).collect();
    let fused = g.add_all(&scaled);
    let p = g.softmax(fused);
    let picked = g.pick(p, 0, label);
    let log = g.log_clamp(picked);
    (fused, g.scale(log, -1.0))
}
