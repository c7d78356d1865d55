#![allow(dead_code)]

use casematch::autograd::ParamGrads;
use casematch::corpus::{Case, ClassCounts, Judgment, LjpExample, MatchExample, CLS, PAD};
use casematch::params::{ParamId, ParamStore};
use casematch::EncoderConfig;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with central differences of `loss` for every scalar
/// of every tensor in `ids`.
pub fn check_params(store: &ParamStore, ids: &[ParamId], analytic: &ParamGrads, loss: impl Fn(&ParamStore) -> f64) -> GradReport {
    let mut work = store.clone();
    let mut report = GradReport::default();
    for &id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + STEP;
            let up = loss(&work);
            work.get_mut(id).data_mut()[i] = orig - STEP;
            let down = loss(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let r = rel_err(a, numeric);
            report.checked += 1;
            if r > report.max_rel || report.worst.is_empty() {
                report.max_rel = report.max_rel.max(r);
                report.worst = format!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", store.name(id));
            }
        }
    }
    report
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        d_model: 8,
        n_shared_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 6,
        dropout_rate: 0.0,
        seed: 11,
    }
}

pub const TINY_CLASSES: ClassCounts = ClassCounts { articles: 3, charges: 3, terms: 3 };

pub fn case(id: &str, body: &[u32]) -> Case {
    let mut tokens = vec![CLS];
    tokens.extend_from_slice(body);
    Case { id: id.into(), tokens, raw_text: String::new() }
}

pub fn tiny_ljp() -> LjpExample {
    LjpExample { case: case("c0", &[4, 7, 3, 9, PAD]), judgment: Judgment::new(2, 0, 1) }
}

pub fn tiny_pair(label: usize) -> MatchExample {
    MatchExample {
        pair_id: "p0".into(),
        source: case("s", &[5, 3, 11, 6, 8]),
        target: case("t", &[10, 4, 4, 7, PAD]),
        label,
    }
}

pub mod grad_suite {
    use super::*;
    use casematch::autograd::{Graph, Var};
    use casematch::encoder::Dropout;
    use casematch::fusion::{entropy_weights, fuse_and_loss};
    use casematch::lfdr::{discriminator_loss, exclusive_loss_graph, shared_loss_graph, DisentangledVars};
    use casematch::pipeline::MatchModel;
    use casematch::pretrain::JudgmentModel;
    use casematch::FusionMode;

    pub fn pretrain_loss() -> GradReport {
        let mut store = ParamStore::new();
        let model = JudgmentModel::new(&mut store, &tiny_encoder(), TINY_CLASSES).unwrap();
        let ex = tiny_ljp();
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let (l, _) = model.example_loss(&mut g, &ex, &mut Dropout::eval()).unwrap();
            (g.value(l).item(), g.backward(l).into_params())
        };
        let (_, grads) = eval(&store);
        let ids: Vec<ParamId> = store.ids().collect();
        check_params(&store, &ids, &grads, |s| eval(s).0)
    }

    fn disentangle_pair(g: &mut Graph, m: &MatchModel, ex: &MatchExample) -> [DisentangledVars; 2] {
        [&ex.source, &ex.target].map(|c| {
            let f = m.encoder.factors(g, &c.tokens, &mut Dropout::eval()).unwrap();
            m.lfdr.disentangle(g, f)
        })
    }

    fn model() -> MatchModel {
        MatchModel::new(&tiny_encoder(), FusionMode::Entropy, 5).unwrap()
    }

    fn check_net(m: &MatchModel, build: impl Fn(&mut Graph, &MatchModel) -> Var) -> GradReport {
        let eval = |s: &ParamStore| {
            let mut local = m.clone();
            local.net = s.clone();
            let mut g = Graph::new(s);
            let l = build(&mut g, &local);
            (g.value(l).item(), g.backward(l).into_params())
        };
        let (_, grads) = eval(&m.net);
        let ids: Vec<ParamId> = m.net.ids().collect();
        check_params(&m.net, &ids, &grads, |s| eval(s).0)
    }

    pub fn exclusive_loss() -> GradReport {
        let m = model();
        let ex = tiny_pair(2);
        check_net(&m, |g, m| {
            let cases = disentangle_pair(g, m, &ex);
            exclusive_loss_graph(g, &m.disc, &m.disc_store, &cases)
        })
    }

    pub fn shared_loss() -> GradReport {
        let m = model();
        let ex = tiny_pair(2);
        check_net(&m, |g, m| {
            let cases = disentangle_pair(g, m, &ex);
            shared_loss_graph(g, &m.disc, &m.disc_store, &cases)
        })
    }

    /// Fusion weights are evaluated once at the base point and held fixed.
    pub fn matching_loss() -> GradReport {
        let m = model();
        let ex = tiny_pair(1);
        let weights = {
            let mut g = Graph::new(&m.net);
            let [s, t] = disentangle_pair(&mut g, &m, &ex);
            let z = m.heads.logits(&mut g, &s, &t);
            entropy_weights(&z.map(|v| g.value(v).data().to_vec())).weights
        };
        check_net(&m, |g, m| {
            let [s, t] = disentangle_pair(g, m, &ex);
            let z = m.heads.logits(g, &s, &t);
            fuse_and_loss(g, z, &weights, ex.label).1
        })
    }

    /// The discriminator's own cross-entropy with respect to its weights.
    pub fn discriminator() -> GradReport {
        let m = model();
        let ex = tiny_pair(0);
        let exclusive: Vec<[Vec<f64>; 3]> = [&ex.source, &ex.target]
            .iter()
            .map(|c| m.disentangled(&c.tokens).unwrap().exclusive)
            .collect();
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = discriminator_loss(&mut g, &m.disc, &exclusive);
            (g.value(l).item(), g.backward(l).into_params())
        };
        let (_, grads) = eval(&m.disc_store);
        let ids: Vec<ParamId> = m.disc_store.ids().collect();
        check_params(&m.disc_store, &ids, &grads, |s| eval(s).0)
    }

    pub fn all() -> Vec<(&'static str, GradReport)> {
        vec![
            ("pretrain", pretrain_loss()),
            ("exclusive", exclusive_loss()),
            ("shared", shared_loss()),
            ("matching", matching_loss()),
            ("discriminator", discriminator()),
        ]
    }
}

pub mod metric_oracle {
    use casematch::metrics::Metrics;
    use casematch::seed;
    use rand::Rng;

    /// Straight from the definitions: count per class by scanning the pairs.
    pub fn brute_force(truth: &[usize], pred: &[usize]) -> Metrics {
        let classes = 4;
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        let mut f1 = Vec::new();
        for c in 0..classes {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fneg = 0u64;
            for (&t, &p) in truth.iter().zip(pred) {
                match (t == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fneg += 1,
                    _ => {}
                }
            }
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
            precision.push(p);
            recall.push(r);
            f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        }
        let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / classes as f64;
        Metrics {
            accuracy: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
            precision: mean(&precision),
            recall: mean(&recall),
            f1: mean(&f1),
        }
    }

    /// Random label/prediction vectors; some draw from a restricted label set so
    /// that classes go missing from the truth, the predictions, or both.
    pub fn random_cases(n: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut rng = seed::rng(2024, "metric-oracle");
        (0..n)
            .map(|_| {
                let len = rng.gen_range(0..40);
                let truth_classes = rng.gen_range(1..=4);
                let pred_classes = rng.gen_range(1..=4);
                let truth = (0..len).map(|_| rng.gen_range(0..truth_classes)).collect();
                let pred = (0..len).map(|_| rng.gen_range(4 - pred_classes..4)).collect();
                (truth, pred)
            })
            .collect()
    }
}
