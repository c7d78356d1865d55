//! Stage 1: judgment-driven pre-training of the factor extractor.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads, Var};
use crate::corpus::{ClassCounts, Judgment, LjpExample};
use crate::encoder::{Dropout, Encoder, EncoderConfig, Linear, EXTRACTOR_PREFIXES};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::{argmax, LOG_CLAMP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 8, learning_rate: 1e-3, seed: 7 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("pretrain epochs, batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One affine classifier per subtask; head `k` reads only factor `k`.
#[derive(Clone, Debug)]
pub struct JudgmentHeads {
    heads: [Linear; 3],
}

pub const HEAD_PREFIX: &str = "judge";

impl JudgmentHeads {
    pub fn new(store: &mut ParamStore, d_model: usize, classes: &ClassCounts, seed_root: u64) -> Self {
        let mut rng = seed::rng(seed_root, "judge");
        let counts = classes.as_array();
        let heads = [0, 1, 2].map(|k| Linear::new(store, &format!("{HEAD_PREFIX}{}", k + 1), d_model, counts[k], &mut rng));
        Self { heads }
    }

    pub fn head(&self, k: usize) -> &Linear {
        &self.heads[k]
    }

    /// `p_k = softmax(affine_k(f_k))`, each `(1, |Y_k|)`.
    pub fn predict(&self, g: &mut Graph, factors: [Var; 3]) -> [Var; 3] {
        [0, 1, 2].map(|k| {
            let z = self.heads[k].forward(g, factors[k]);
            g.softmax(z)
        })
    }
}

/// `−(1/3) Σ_k log p_k[y_k]` on the tape.
pub fn pretrain_loss(g: &mut Graph, probs: [Var; 3], judgment: &Judgment) -> Var {
    let labels = judgment.as_array();
    let logs: Vec<Var> = (0..3)
        .map(|k| {
            let p = g.pick(probs[k], 0, labels[k]);
            g.log_clamp(p)
        })
        .collect();
    let total = g.add_all(&logs);
    g.scale(total, -1.0 / 3.0)
}

/// Same loss on plain probability vectors.
pub fn pretrain_loss_value(probs: &[Vec<f64>; 3], judgment: &Judgment) -> f64 {
    let labels = judgment.as_array();
    -(0..3).map(|k| probs[k][labels[k]].max(LOG_CLAMP).ln()).sum::<f64>() / 3.0
}

/// Encoder, factor layers and judgment heads in one parameter store.
#[derive(Clone, Debug)]
pub struct JudgmentModel {
    pub encoder: Encoder,
    pub heads: JudgmentHeads,
    pub classes: ClassCounts,
}

impl JudgmentModel {
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, classes: ClassCounts) -> Result<Self> {
        let encoder = Encoder::new(store, enc)?;
        let heads = JudgmentHeads::new(store, enc.d_model, &classes, enc.seed);
        Ok(Self { encoder, heads, classes })
    }

    pub fn example_loss(&self, g: &mut Graph, ex: &LjpExample, dropout: &mut Dropout) -> Result<(Var, [Var; 3])> {
        let f = self.encoder.factors(g, &ex.case.tokens, dropout)?;
        let probs = self.heads.predict(g, f);
        Ok((pretrain_loss(g, probs, &ex.judgment), probs))
    }

    /// Eval-mode probability vectors for one case.
    pub fn predict(&self, store: &ParamStore, tokens: &[u32]) -> Result<[Vec<f64>; 3]> {
        let mut g = Graph::new(store);
        let f = self.encoder.factors(&mut g, tokens, &mut Dropout::eval())?;
        let p = self.heads.predict(&mut g, f);
        Ok(p.map(|v| g.value(v).data().to_vec()))
    }

    /// Mean loss and gradient over a batch, in the given order.
    pub fn batch_grad(&self, store: &ParamStore, batch: &[&LjpExample], mut dropout_for: impl FnMut(usize) -> Dropout) -> Result<(f64, ParamGrads, Vec<[usize; 3]>)> {
        let mut grads = ParamGrads::new();
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let mut dropout = dropout_for(i);
            let mut g = Graph::new(store);
            let (l, probs) = self.example_loss(&mut g, ex, &mut dropout)?;
            preds.push(probs.map(|p| argmax(g.value(p).data())));
            loss += g.value(l).item();
            grads.accumulate(g.backward(l).into_params());
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((loss * inv, grads, preds))
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc_article: f64,
    pub acc_charge: f64,
    pub acc_term: f64,
}

pub struct PretrainOutput {
    pub store: ParamStore,
    pub model: JudgmentModel,
    pub history: Vec<EpochMetrics>,
    /// Mean loss of every mini-batch, in training order.
    pub batch_losses: Vec<f64>,
}

impl PretrainOutput {
    /// Extractor-only copy of the trained weights: the judgment heads are dropped.
    pub fn extractor(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for id in self.store.ids_with_prefix(&EXTRACTOR_PREFIXES) {
            out.add(self.store.name(id), self.store.get(id).clone());
        }
        out
    }
}

/// Mini-batch training on the pre-training loss over seeded shuffles.
/// Reported accuracies are those of the training-time predictions.
pub fn run_pretraining(data: &[LjpExample], classes: ClassCounts, enc: &EncoderConfig, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for ex in data {
        classes.validate(&ex.judgment).map_err(|e| Error::Invalid(format!("case {}: {e}", ex.case.id)))?;
    }
    let mut store = ParamStore::new();
    let model = JudgmentModel::new(&mut store, enc, classes)?;
    for ex in data {
        model.encoder.check_tokens(&ex.case.tokens)?;
    }
    let mut adam = Adam::new(cfg.learning_rate, store.ids().collect());
    let mut shuffle = seed::rng(cfg.seed, "pretrain.shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut correct = [0usize; 3];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LjpExample> = chunk.iter().map(|&i| &data[i]).collect();
            let rate = enc.dropout_rate;
            let (loss, grads, preds) = model.batch_grad(&store, &batch, |i| {
                Dropout::train(rate, seed::rng(cfg.seed, &format!("pretrain.dropout.{step}.{i}")))
            })?;
            adam.step(&mut store, &grads);
            step += 1;
            batch_losses.push(loss);
            loss_sum += loss * batch.len() as f64;
            for (ex, p) in batch.iter().zip(&preds) {
                for k in 0..3 {
                    correct[k] += usize::from(p[k] == ex.judgment.as_array()[k]);
                }
            }
        }
        let n = data.len() as f64;
        history.push(EpochMetrics {
            epoch,
            loss: loss_sum / n,
            acc_article: correct[0] as f64 / n,
            acc_charge: correct[1] as f64 / n,
            acc_term: correct[2] as f64 / n,
        });
    }

    Ok(PretrainOutput { store, model, history, batch_losses })
}

/// Per-subtask accuracy of eval-mode predictions.
pub fn judgment_accuracy(model: &JudgmentModel, store: &ParamStore, data: &[LjpExample]) -> Result<[f64; 3]> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = [0usize; 3];
    for ex in data {
        let p = model.predict(store, &ex.case.tokens)?;
        for k in 0..3 {
            correct[k] += usize::from(argmax(&p[k]) == ex.judgment.as_array()[k]);
        }
    }
    Ok(correct.map(|c| c as f64 / data.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_ljp_dataset, tokenize_ljp, Case, GenSpec, CLS};
    use crate::tensor::Mat;

    #[test]
    fn uniform_heads_give_ln_c() {
        let u = vec![0.25; 4];
        let l = pretrain_loss_value(&[u.clone(), u.clone(), u], &Judgment::new(0, 1, 2));
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn perfect_heads_give_zero() {
        let one = |k: usize| {
            let mut v = vec![0.0; 3];
            v[k] = 1.0;
            v
        };
        assert_eq!(pretrain_loss_value(&[one(0), one(1), one(2)], &Judgment::new(0, 1, 2)), 0.0);
    }

    #[test]
    fn hand_computed_probabilities() {
        let probs = [vec![0.5, 0.5], vec![0.25, 0.75], vec![1.0, 0.0]];
        let expected = (2f64.ln() + 4f64.ln()) / 3.0;
        let l = pretrain_loss_value(&probs, &Judgment::new(0, 0, 0));
        assert!((l - expected).abs() < 1e-12);
        assert_eq!(format!("{l:.4}"), "0.6931");
    }

    #[test]
    fn clamp_guards_zero_probability() {
        let l = pretrain_loss_value(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]], &Judgment::new(0, 0, 0));
        assert!((l - (-LOG_CLAMP.ln() / 3.0)).abs() < 1e-9);
    }

    fn tiny_model() -> (ParamStore, JudgmentModel) {
        let enc = EncoderConfig { vocab_size: 12, d_model: 8, n_shared_layers: 1, n_heads: 2, ffn_dim: 8, max_len: 8, dropout_rate: 0.0, seed: 1 };
        let mut store = ParamStore::new();
        let m = JudgmentModel::new(&mut store, &enc, ClassCounts { articles: 3, charges: 3, terms: 3 }).unwrap();
        (store, m)
    }

    #[test]
    fn zero_heads_predict_uniform_and_sum_to_one() {
        let (mut store, model) = tiny_model();
        for k in 0..3 {
            let h = model.heads.head(k).clone();
            let (r, c) = store.get(h.w).shape();
            *store.get_mut(h.w) = Mat::zeros(r, c);
        }
        let p = model.predict(&store, &[CLS, 4, 5]).unwrap();
        for pk in &p {
            assert!(pk.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let (store, model) = tiny_model();
        for t in [[CLS, 3, 4], [CLS, 9, 11], [CLS, 2, 2]] {
            for pk in model.predict(&store, &t).unwrap() {
                assert!((pk.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_one_loss_ignores_factor_two() {
        let (store, model) = tiny_model();
        let mut g = Graph::new(&store);
        let f = [0, 1, 2].map(|k| g.input(Mat::row_vector((0..8).map(|i| (i + k) as f64 * 0.1).collect())));
        let p = model.heads.predict(&mut g, f);
        let picked = g.pick(p[0], 0, 1);
        let l = g.log_clamp(picked);
        let grads = g.backward(l);
        assert!(grads.wrt(f[0]).is_some());
        assert!(grads.wrt(f[1]).is_none());
        assert!(grads.wrt(f[2]).is_none());
    }

    #[test]
    fn batch_loss_is_mean_of_example_losses() {
        let (store, model) = tiny_model();
        let exs: Vec<LjpExample> = (0..4)
            .map(|i| LjpExample {
                case: Case { id: format!("c{i}"), tokens: vec![CLS, 3 + i, 7, 8 - i], raw_text: String::new() },
                judgment: Judgment::new(i as usize % 3, 1, 2 - i as usize % 3),
            })
            .collect();
        let refs: Vec<&LjpExample> = exs.iter().collect();
        let (batch, _, _) = model.batch_grad(&store, &refs, |_| Dropout::eval()).unwrap();
        let singles: f64 = refs
            .iter()
            .map(|ex| model.batch_grad(&store, &[*ex], |_| Dropout::eval()).unwrap().0)
            .sum::<f64>()
            / 4.0;
        assert!((batch - singles).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_labels_before_training() {
        let spec = GenSpec { n_cases: 10, ..GenSpec::default() };
        let recs = gen_ljp_dataset(&spec).unwrap();
        let vocab = crate::corpus::build_vocab(&recs.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), 256).unwrap();
        let mut data = tokenize_ljp(&recs, &vocab, 64, &spec.classes()).unwrap();
        data[3].judgment.charge = spec.n_charges;
        let enc = EncoderConfig { vocab_size: vocab.len(), d_model: 8, n_heads: 2, ffn_dim: 8, n_shared_layers: 1, ..EncoderConfig::default() };
        let err = run_pretraining(&data, spec.classes(), &enc, &PretrainConfig::default()).err().unwrap();
        assert!(err.to_string().contains("charge label"));
    }
}
