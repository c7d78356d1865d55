//! Stage 2: matching with de-redundant factors, evaluation, ablations and
//! analysis exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{ClassCounts, MatchExample, MATCH_LEVELS};
use crate::encoder::{Dropout, Encoder, EncoderConfig, EXTRACTOR_PREFIXES};
use crate::error::{Error, Result};
use crate::fusion::{fuse_and_loss, fusion_weights, FusionMode, FusionResult, MatchHeads, MATCH_PREFIX, N_HEADS};
use crate::lfdr::{
    discriminator_accuracy, exclusive_loss_graph, shared_loss_graph, update_discriminator, DisentangledFactors,
    DisentangledVars, Discriminator, Lfdr, DISC_PREFIX, LFDR_PREFIX,
};
use crate::metrics::{evaluate_predictions, Metrics};
use crate::optim::Adam;
use crate::params::{Checkpoint, ParamStore};
use crate::pretrain::PretrainOutput;
use crate::seed;
use crate::tensor::entropy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_ex: bool,
    pub no_sh: bool,
    pub no_fusion: bool,
    pub no_pretrain: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["none", "no_ex", "no_sh", "no_fusion", "no_pretrain"];

    pub fn from_name(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "none" => {}
            "no_ex" => a.no_ex = true,
            "no_sh" => a.no_sh = true,
            "no_fusion" => a.no_fusion = true,
            "no_pretrain" => a.no_pretrain = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}; expected one of {:?}", Self::NAMES))),
        }
        Ok(a)
    }

    pub fn fusion_mode(&self) -> FusionMode {
        if self.no_fusion {
            FusionMode::Uniform
        } else {
            FusionMode::Entropy
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 4, learning_rate: 1e-3, lambda1: 0.05, lambda2: 0.05, ablation: Ablation::default(), seed: 7 }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("stage2 epochs, batch_size and learning_rate must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("stage2 lambdas must be non-negative".into()));
        }
        Ok(())
    }

    /// Loss weights after the ablation flags are applied.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        (
            if self.ablation.no_ex { 0.0 } else { self.lambda1 },
            if self.ablation.no_sh { 0.0 } else { self.lambda2 },
        )
    }
}

/// `L_mat + λ1·L_ex + λ2·L_sh`.
pub fn total_loss(l_mat: f64, l_ex: f64, l_sh: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_mat + (lambda1 * l_ex + lambda2 * l_sh)
}

/// Metadata stored as a checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub encoder: EncoderConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub classes: Option<ClassCounts>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fusion: Option<FusionMode>,
}

pub const STAGE1_KIND: &str = "stage1";
pub const STAGE2_KIND: &str = "stage2";

pub fn read_header(ckpt: &Checkpoint, kind: &str) -> Result<CheckpointHeader> {
    let header: CheckpointHeader =
        serde_json::from_str(&ckpt.header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    Ok(header)
}

/// Saves the full stage-1 model (extractor and judgment heads).
pub fn save_stage1(out: &PretrainOutput, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: STAGE1_KIND.into(),
        encoder: out.model.encoder.config().clone(),
        classes: Some(out.model.classes),
        fusion: None,
    };
    out.store.save(path, &serde_json::to_string(&header).expect("header serializes"), &[])
}

/// Extractor, de-redundancy layers, match heads and the discriminator.
/// The discriminator lives in its own store so the matching objective can
/// never update it.
#[derive(Clone, Debug)]
pub struct MatchModel {
    pub encoder: Encoder,
    pub lfdr: Lfdr,
    pub heads: MatchHeads,
    pub disc: Discriminator,
    pub net: ParamStore,
    pub disc_store: ParamStore,
    pub fusion: FusionMode,
}

/// Parameter prefixes of the matching network (everything but the
/// discriminator).
pub const NET_PREFIXES: [&str; 4] = [EXTRACTOR_PREFIXES[0], EXTRACTOR_PREFIXES[1], LFDR_PREFIX, MATCH_PREFIX];

/// Output of one forward pass over a pair.
struct PairPass {
    source: DisentangledVars,
    target: DisentangledVars,
}

impl MatchModel {
    /// Randomly initialized model; `seed` drives the stage-2 layers, the
    /// encoder uses its own config seed.
    pub fn new(enc: &EncoderConfig, fusion: FusionMode, seed_root: u64) -> Result<Self> {
        let mut net = ParamStore::new();
        let encoder = Encoder::new(&mut net, enc)?;
        let d = enc.d_model;
        let lfdr = Lfdr::new(&mut net, d, &mut seed::rng(seed_root, "stage2.lfdr"));
        let heads = MatchHeads::new(&mut net, d, &mut seed::rng(seed_root, "stage2.heads"));
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::new(&mut disc_store, d, seed_root);
        Ok(Self { encoder, lfdr, heads, disc, net, disc_store, fusion })
    }

    /// Copies the pre-trained extractor out of a stage-1 checkpoint.
    pub fn load_extractor(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let header = read_header(ckpt, STAGE1_KIND)?;
        if header.encoder.d_model != self.encoder.config().d_model {
            return Err(Error::Checkpoint(format!(
                "stage-1 d_model {} does not match {}",
                header.encoder.d_model,
                self.encoder.config().d_model
            )));
        }
        ckpt.restore_into(&mut self.net, &EXTRACTOR_PREFIXES)
    }

    pub fn load_extractor_from(&mut self, pretrained: &ParamStore) -> Result<()> {
        self.net.copy_from(pretrained, &EXTRACTOR_PREFIXES).map(|_| ())
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            kind: STAGE2_KIND.into(),
            encoder: self.encoder.config().clone(),
            classes: None,
            fusion: Some(self.fusion),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = self.net.clone();
        for id in self.disc_store.ids() {
            all.add(self.disc_store.name(id), self.disc_store.get(id).clone());
        }
        all.save(path, &serde_json::to_string(&self.header()).expect("header serializes"), &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let header = read_header(&ckpt, STAGE2_KIND)?;
        let mut model = Self::new(&header.encoder, header.fusion.unwrap_or(FusionMode::Entropy), 0)?;
        ckpt.restore_into(&mut model.net, &NET_PREFIXES)?;
        ckpt.restore_into(&mut model.disc_store, &[DISC_PREFIX])?;
        Ok(model)
    }

    fn pass(&self, g: &mut Graph, ex: &MatchExample, dropout: &mut Dropout) -> Result<PairPass> {
        let fs = self.encoder.factors(g, &ex.source.tokens, dropout)?;
        let ft = self.encoder.factors(g, &ex.target.tokens, dropout)?;
        Ok(PairPass { source: self.lfdr.disentangle(g, fs), target: self.lfdr.disentangle(g, ft) })
    }

    fn head_values(g: &Graph, logits: &[Var; N_HEADS]) -> [Vec<f64>; N_HEADS] {
        logits.map(|z| g.value(z).data().to_vec())
    }

    /// Eval-mode fusion output for one pair.
    pub fn predict(&self, ex: &MatchExample) -> Result<FusionResult> {
        let mut g = Graph::new(&self.net);
        let p = self.pass(&mut g, ex, &mut Dropout::eval())?;
        let logits = self.heads.logits(&mut g, &p.source, &p.target);
        let values = Self::head_values(&g, &logits);
        let fw = fusion_weights(&values, self.fusion);
        let fused = crate::fusion::fuse(&values, &fw.weights);
        Ok(FusionResult { logits: values, entropies: fw.entropies, weights: fw.weights, fused })
    }

    /// Eval-mode disentangled factors of one case.
    pub fn disentangled(&self, tokens: &[u32]) -> Result<DisentangledFactors> {
        let fs = self.encoder.factor_set(&self.net, tokens)?;
        Ok(self.lfdr.apply(&self.net, &fs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub mat_loss: f64,
    pub ex_loss: f64,
    pub sh_loss: f64,
    pub disc_loss: f64,
    pub weight_min: [f64; N_HEADS],
    pub weight_max: [f64; N_HEADS],
    pub weight_mean: [f64; N_HEADS],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2History {
    pub epochs: Vec<Stage2Epoch>,
    pub batch_losses: Vec<f64>,
}

struct EpochAccumulator {
    n: usize,
    sums: [f64; 4],
    disc: f64,
    batches: usize,
    w_min: [f64; N_HEADS],
    w_max: [f64; N_HEADS],
    w_sum: [f64; N_HEADS],
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            n: 0,
            sums: [0.0; 4],
            disc: 0.0,
            batches: 0,
            w_min: [f64::INFINITY; N_HEADS],
            w_max: [f64::NEG_INFINITY; N_HEADS],
            w_sum: [0.0; N_HEADS],
        }
    }

    fn finish(self, epoch: usize) -> Stage2Epoch {
        let n = self.n as f64;
        Stage2Epoch {
            epoch,
            loss: self.sums[0] / n,
            mat_loss: self.sums[1] / n,
            ex_loss: self.sums[2] / n,
            sh_loss: self.sums[3] / n,
            disc_loss: self.disc / self.batches as f64,
            weight_min: self.w_min,
            weight_max: self.w_max,
            weight_mean: self.w_sum.map(|s| s / n),
        }
    }
}

/// Trains the matching network. Every mini-batch first takes one
/// discriminator step on the batch's exclusive factors, then one step of the
/// combined objective on the network with the updated discriminator frozen.
pub fn train_stage2(model: &mut MatchModel, data: &[MatchExample], cfg: &Stage2Config) -> Result<Stage2History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for ex in data {
        if ex.label >= MATCH_LEVELS {
            return Err(Error::Invalid(format!("pair {}: label {} out of range", ex.pair_id, ex.label)));
        }
        model.encoder.check_tokens(&ex.source.tokens)?;
        model.encoder.check_tokens(&ex.target.tokens)?;
    }
    let (lambda1, lambda2) = cfg.effective_lambdas();
    let rate = model.encoder.config().dropout_rate;
    let mut net_adam = Adam::new(cfg.learning_rate, model.net.ids().collect());
    let mut disc_adam = Adam::new(cfg.learning_rate, model.disc_store.ids().collect());
    let mut shuffle = seed::rng(cfg.seed, "stage2.shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Stage2History::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut acc = EpochAccumulator::new();
        for chunk in order.chunks(cfg.batch_size) {
            let grads = {
                let mut g = Graph::new(&model.net);
                let mut passes = Vec::with_capacity(chunk.len());
                for (i, &idx) in chunk.iter().enumerate() {
                    let mut dropout = Dropout::train(rate, seed::rng(cfg.seed, &format!("stage2.dropout.{step}.{i}")));
                    passes.push(model.pass(&mut g, &data[idx], &mut dropout)?);
                }

                let exclusive: Vec<[Vec<f64>; 3]> = passes
                    .iter()
                    .flat_map(|p| [&p.source, &p.target])
                    .map(|c| c.exclusive.map(|v| g.value(v).data().to_vec()))
                    .collect();
                acc.disc += update_discriminator(&mut model.disc_store, &model.disc, &mut disc_adam, &exclusive);
                acc.batches += 1;

                let mut totals = Vec::with_capacity(chunk.len());
                for (p, &idx) in passes.iter().zip(chunk) {
                    let cases = [p.source, p.target];
                    let l_ex = exclusive_loss_graph(&mut g, &model.disc, &model.disc_store, &cases);
                    let l_sh = shared_loss_graph(&mut g, &model.disc, &model.disc_store, &cases);
                    let logits = model.heads.logits(&mut g, &p.source, &p.target);
                    let fw = fusion_weights(&MatchModel::head_values(&g, &logits), model.fusion);
                    let (_, l_mat) = fuse_and_loss(&mut g, logits, &fw.weights, data[idx].label);
                    let ex_term = g.scale(l_ex, lambda1);
                    let sh_term = g.scale(l_sh, lambda2);
                    let reg = g.add(ex_term, sh_term);
                    let total = g.add(l_mat, reg);

                    let vals = [total, l_mat, l_ex, l_sh].map(|v| g.value(v).item());
                    for (s, v) in acc.sums.iter_mut().zip(vals) {
                        *s += v;
                    }
                    for k in 0..N_HEADS {
                        let w = fw.weights[k];
                        acc.w_min[k] = acc.w_min[k].min(w);
                        acc.w_max[k] = acc.w_max[k].max(w);
                        acc.w_sum[k] += w;
                    }
                    acc.n += 1;
                    totals.push(total);
                }
                let sum = g.add_all(&totals);
                let mean = g.scale(sum, 1.0 / chunk.len() as f64);
                history.batch_losses.push(g.value(mean).item());
                g.backward(mean).into_params()
            };
            net_adam.step(&mut model.net, &grads);
            step += 1;
        }
        history.epochs.push(acc.finish(epoch));
    }
    Ok(history)
}

/// Argmax predictions of the fused logits, ties toward the lower class.
pub fn predict_all(model: &MatchModel, data: &[MatchExample]) -> Result<Vec<FusionResult>> {
    data.iter().map(|ex| model.predict(ex)).collect()
}

pub fn evaluate(model: &MatchModel, data: &[MatchExample]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds: Vec<usize> = predict_all(model, data)?.iter().map(FusionResult::prediction).collect();
    let truth: Vec<usize> = data.iter().map(|ex| ex.label).collect();
    Ok(evaluate_predictions(&truth, &preds))
}

/// How well the discriminator separates exclusive factors by type, and how
/// uncertain it is on shared factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub disc_accuracy: f64,
    /// Mean entropy (nats) of the discriminator over every shared factor,
    /// intermediate and final.
    pub shared_entropy: f64,
}

pub fn disentanglement_report(model: &MatchModel, data: &[MatchExample]) -> Result<DisentanglementReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut exclusive = Vec::with_capacity(2 * data.len());
    let mut h_sum = 0.0;
    let mut h_n = 0usize;
    for ex in data {
        for case in [&ex.source, &ex.target] {
            let df = model.disentangled(&case.tokens)?;
            for v in df.shared_mid.iter().chain(std::iter::once(&df.shared)) {
                h_sum += entropy(&model.disc.discriminate(&model.disc_store, v));
                h_n += 1;
            }
            exclusive.push(df.exclusive);
        }
    }
    Ok(DisentanglementReport {
        disc_accuracy: discriminator_accuracy(&model.disc, &model.disc_store, &exclusive),
        shared_entropy: h_sum / h_n as f64,
    })
}

/// Up to `per_class` pairs labelled fully matched and as many labelled
/// unrelated, in input order.
pub fn select_analysis_pairs(data: &[MatchExample], per_class: usize) -> Vec<MatchExample> {
    let top = MATCH_LEVELS - 1;
    let matched = data.iter().filter(|e| e.label == top).take(per_class);
    let unrelated = data.iter().filter(|e| e.label == 0).take(per_class);
    matched.chain(unrelated).cloned().collect()
}

pub const FACTOR_NAMES: [&str; 4] = ["shared", "ex_article", "ex_charge", "ex_term"];

/// One exported factor vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub case_id: String,
    pub role: String,
    pub label: usize,
    pub factor: String,
    pub values: Vec<f32>,
}

const EMBEDDING_HEADER: &str = "# case_id\trole\tlabel\tfactor\tvalues";

/// Writes four rows per case (shared, then the three exclusive factors) as
/// tab-separated text; values are f32 printed with 9 significant digits.
pub fn export_factor_embeddings(model: &MatchModel, pairs: &[MatchExample], path: &Path) -> Result<usize> {
    let mut out = String::new();
    out.push_str(EMBEDDING_HEADER);
    out.push('\n');
    let mut rows = 0;
    for ex in pairs {
        for (role, case) in [("source", &ex.source), ("target", &ex.target)] {
            let df = model.disentangled(&case.tokens)?;
            let blocks = [&df.shared, &df.exclusive[0], &df.exclusive[1], &df.exclusive[2]];
            for (name, v) in FACTOR_NAMES.iter().zip(blocks) {
                let _ = write!(out, "{}\t{role}\t{}\t{name}\t", case.id, ex.label);
                let text: Vec<String> = v.iter().map(|&x| format!("{:.8e}", x as f32)).collect();
                out.push_str(&text.join(" "));
                out.push('\n');
                rows += 1;
            }
        }
    }
    fs::write(path, out)?;
    Ok(rows)
}

pub fn parse_factor_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [case_id, role, label, factor, values] = fields.as_slice() else {
            return Err(bad(i + 1, format!("expected 5 fields, found {}", fields.len())));
        };
        let label = label.parse().map_err(|e| bad(i + 1, format!("label: {e}")))?;
        let values = values
            .split(' ')
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(i + 1, format!("value: {e}")))?;
        rows.push(EmbeddingRow {
            case_id: case_id.to_string(),
            role: role.to_string(),
            label,
            factor: factor.to_string(),
            values,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile with linear interpolation between closest ranks on sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn five_number(values: &[f64]) -> Result<FiveNumber> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(FiveNumber { min: s[0], q1: quantile(&s, 0.25), median: quantile(&s, 0.5), q3: quantile(&s, 0.75), max: s[s.len() - 1] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub pair_id: String,
    pub entropies: [f64; N_HEADS],
    pub weights: [f64; N_HEADS],
    pub prediction: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub heads: [FiveNumber; N_HEADS],
}

/// Writes one JSON record per pair and returns per-head five-number
/// summaries of the fusion weights.
pub fn export_fusion_weights(model: &MatchModel, pairs: &[MatchExample], path: &Path) -> Result<(Vec<WeightRecord>, WeightSummary)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut records = Vec::with_capacity(pairs.len());
    for ex in pairs {
        let r = model.predict(ex)?;
        records.push(WeightRecord {
            pair_id: ex.pair_id.clone(),
            entropies: r.entropies,
            weights: r.weights,
            prediction: r.prediction(),
            label: ex.label,
        });
    }
    crate::corpus::save_dataset(path, &records)?;
    let summary = weight_summary(&records)?;
    Ok((records, summary))
}

pub fn weight_summary(records: &[WeightRecord]) -> Result<WeightSummary> {
    let mut heads = Vec::with_capacity(N_HEADS);
    for k in 0..N_HEADS {
        let col: Vec<f64> = records.iter().map(|r| r.weights[k]).collect();
        heads.push(five_number(&col)?);
    }
    Ok(WeightSummary { heads: [heads[0], heads[1], heads[2], heads[3]] })
}
