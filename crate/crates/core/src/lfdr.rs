//! Legal-factor de-redundancy: exclusive and shared factors, the factor-type
//! discriminator, and the two adversarial losses that supervise them.
//!
//! The discriminator lives in its own [`ParamStore`]. Inside the matching
//! objective its weights enter the tape as constants, so the matching step
//! can never move them; its own update sees the exclusive factors as plain
//! values, so it can never move the matching network.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{FactorSet, Linear};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::{entropy, softmax, Mat, LOG_CLAMP};

pub const LFDR_PREFIX: &str = "lfdr.";
pub const DISC_PREFIX: &str = "disc.";

/// Index (1-based) of the factor paired with factor `k` in the intermediate
/// shared layer: 1→2, 2→3, 3→1.
pub fn partner(k: usize) -> usize {
    1 + (k % 3)
}

/// Affine maps producing exclusive and shared factors.
#[derive(Clone, Debug)]
pub struct Lfdr {
    exclusive: [Linear; 3],
    shared_mid: [Linear; 3],
    shared_final: Linear,
}

/// Tape handles for one case's de-redundant factors.
#[derive(Clone, Copy, Debug)]
pub struct DisentangledVars {
    pub exclusive: [Var; 3],
    pub shared_mid: [Var; 3],
    pub shared: Var,
}

/// Plain values of one case's de-redundant factors.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledFactors {
    pub exclusive: [Vec<f64>; 3],
    pub shared_mid: [Vec<f64>; 3],
    pub shared: Vec<f64>,
}

impl DisentangledVars {
    pub fn values(&self, g: &Graph) -> DisentangledFactors {
        let v = |x: Var| g.value(x).data().to_vec();
        DisentangledFactors {
            exclusive: self.exclusive.map(v),
            shared_mid: self.shared_mid.map(v),
            shared: v(self.shared),
        }
    }
}

impl Lfdr {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let exclusive = [1, 2, 3].map(|k| Linear::new(store, &format!("{LFDR_PREFIX}ex{k}"), d, d, rng));
        let shared_mid = [1, 2, 3].map(|k| Linear::new(store, &format!("{LFDR_PREFIX}sh{k}"), 2 * d, d, rng));
        let shared_final = Linear::new(store, &format!("{LFDR_PREFIX}sh_final"), 3 * d, d, rng);
        Self { exclusive, shared_mid, shared_final }
    }

    pub fn exclusive_map(&self, k: usize) -> &Linear {
        &self.exclusive[k]
    }

    pub fn shared_map(&self, k: usize) -> &Linear {
        &self.shared_mid[k]
    }

    pub fn shared_final_map(&self) -> &Linear {
        &self.shared_final
    }

    /// `f_ex_k = W_k f_k + b_k`.
    pub fn exclusive_factors(&self, g: &mut Graph, f: [Var; 3]) -> [Var; 3] {
        [0, 1, 2].map(|k| self.exclusive[k].forward(g, f[k]))
    }

    /// Intermediate shared factors from `[f_k; f_partner(k)]`, then the final
    /// shared factor from the three intermediates in index order.
    pub fn shared_factor(&self, g: &mut Graph, f: [Var; 3]) -> ([Var; 3], Var) {
        let mid = [0, 1, 2].map(|k| {
            let pair = g.concat_cols(&[f[k], f[partner(k + 1) - 1]]);
            self.shared_mid[k].forward(g, pair)
        });
        let all = g.concat_cols(&mid);
        (mid, self.shared_final.forward(g, all))
    }

    pub fn disentangle(&self, g: &mut Graph, f: [Var; 3]) -> DisentangledVars {
        let exclusive = self.exclusive_factors(g, f);
        let (shared_mid, shared) = self.shared_factor(g, f);
        DisentangledVars { exclusive, shared_mid, shared }
    }

    /// Value-level convenience for analysis.
    pub fn apply(&self, store: &ParamStore, fs: &FactorSet) -> DisentangledFactors {
        let mut g = Graph::new(store);
        let f = fs.factors.clone().map(|v| g.constant(Mat::row_vector(v)));
        self.disentangle(&mut g, f).values(&g)
    }
}

/// Three affine layers with tanh between them and a softmax over the three
/// factor types.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: [Linear; 3],
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, d: usize, seed_root: u64) -> Self {
        let mut rng = seed::rng(seed_root, "discriminator");
        let layers = [
            Linear::new(store, &format!("{DISC_PREFIX}l1"), d, d, &mut rng),
            Linear::new(store, &format!("{DISC_PREFIX}l2"), d, d, &mut rng),
            Linear::new(store, &format!("{DISC_PREFIX}l3"), d, 3, &mut rng),
        ];
        Self { layers }
    }

    pub fn layer(&self, i: usize) -> &Linear {
        &self.layers[i]
    }

    /// Row-wise probabilities with trainable weights (graph over the
    /// discriminator's own store).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i < 2 {
                h = g.tanh(h);
            }
        }
        g.softmax(h)
    }

    /// Row-wise probabilities with the weights of `disc` entering `g` as
    /// constants.
    pub fn forward_const(&self, g: &mut Graph, disc: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let w = g.constant(disc.get(l.w).clone());
            let b = g.constant(disc.get(l.b).clone());
            let y = g.matmul(h, w);
            h = g.add_row(y, b);
            if i < 2 {
                h = g.tanh(h);
            }
        }
        g.softmax(h)
    }

    /// `P_D(· | v)` for a plain vector.
    pub fn discriminate(&self, disc: &ParamStore, v: &[f64]) -> Vec<f64> {
        let mut h = v.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(disc, &h);
            if i < 2 {
                h.iter_mut().for_each(|x| *x = x.tanh());
            }
        }
        softmax(&h)
    }
}

/// Exclusive-factor loss from discriminator outputs: `probs[i][k]` is
/// `P_D(· | f_ex_k)` for case `i`. Returns `−mean log P_D(k | f_ex_k)`.
pub fn exclusive_loss(probs: &[[Vec<f64>; 3]]) -> f64 {
    let n = probs.len() * 3;
    -probs.iter().flat_map(|p| (0..3).map(move |k| p[k][k].max(LOG_CLAMP).ln())).sum::<f64>() / n as f64
}

/// Shared-factor loss from discriminator outputs on every shared factor
/// (intermediate and final): `−mean H(P_D)`.
pub fn shared_loss(probs: &[Vec<f64>]) -> f64 {
    -probs.iter().map(|p| entropy(p)).sum::<f64>() / probs.len() as f64
}

/// Stacks `rows` (each `(1, d)`) and runs the frozen discriminator on them.
fn frozen_probs(g: &mut Graph, d: &Discriminator, disc: &ParamStore, rows: &[Var]) -> Var {
    let x = g.concat_rows(rows);
    d.forward_const(g, disc, x)
}

/// Tape version of [`exclusive_loss`] over a set of cases (source and target
/// of a pair, for instance). The discriminator is frozen.
pub fn exclusive_loss_graph(g: &mut Graph, d: &Discriminator, disc: &ParamStore, cases: &[DisentangledVars]) -> Var {
    let mut terms = Vec::with_capacity(3);
    for k in 0..3 {
        let rows: Vec<Var> = cases.iter().map(|c| c.exclusive[k]).collect();
        let p = frozen_probs(g, d, disc, &rows);
        let col = g.slice_cols(p, k, k + 1);
        let logs = g.log_clamp(col);
        terms.push(g.sum(logs));
    }
    let total = g.add_all(&terms);
    g.scale(total, -1.0 / (3 * cases.len()) as f64)
}

/// Tape version of [`shared_loss`] over the four shared factors of each case.
pub fn shared_loss_graph(g: &mut Graph, d: &Discriminator, disc: &ParamStore, cases: &[DisentangledVars]) -> Var {
    let rows: Vec<Var> = cases
        .iter()
        .flat_map(|c| std::iter::once(c.shared).chain(c.shared_mid))
        .collect();
    let p = frozen_probs(g, d, disc, &rows);
    let h = g.entropy_sum(p);
    g.scale(h, -1.0 / rows.len() as f64)
}

/// Cross-entropy of the discriminator on exclusive factors, with trainable
/// discriminator weights. `exclusive[i][k]` is case `i`'s factor `k`.
pub fn discriminator_loss(g: &mut Graph, d: &Discriminator, exclusive: &[[Vec<f64>; 3]]) -> Var {
    let mut terms = Vec::with_capacity(3);
    for k in 0..3 {
        let data: Vec<f64> = exclusive.iter().flat_map(|e| e[k].iter().copied()).collect();
        let x = g.constant(Mat::from_vec(exclusive.len(), exclusive[0][k].len(), data));
        let p = d.forward(g, x);
        let col = g.slice_cols(p, k, k + 1);
        let logs = g.log_clamp(col);
        terms.push(g.sum(logs));
    }
    let total = g.add_all(&terms);
    g.scale(total, -1.0 / (3 * exclusive.len()) as f64)
}

/// One optimizer step on the discriminator. Returns the pre-step loss.
pub fn update_discriminator(disc: &mut ParamStore, d: &Discriminator, adam: &mut Adam, exclusive: &[[Vec<f64>; 3]]) -> f64 {
    let (loss, grads) = {
        let mut g = Graph::new(disc);
        let l = discriminator_loss(&mut g, d, exclusive);
        (g.value(l).item(), g.backward(l).into_params())
    };
    adam.step(disc, &grads);
    loss
}

/// Fraction of exclusive factors the discriminator attributes to their own
/// type (argmax, ties toward the lower index).
pub fn discriminator_accuracy(d: &Discriminator, disc: &ParamStore, exclusive: &[[Vec<f64>; 3]]) -> f64 {
    let mut correct = 0usize;
    for e in exclusive {
        for (k, v) in e.iter().enumerate() {
            correct += usize::from(crate::tensor::argmax(&d.discriminate(disc, v)) == k);
        }
    }
    correct as f64 / (3 * exclusive.len()) as f64
}
