//! Shared transformer encoder plus one extra transformer layer per legal
//! factor. The factor vectors are the CLS rows of the three factor layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::seed;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_shared_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_shared_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 128,
            dropout_rate: 0.1,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_shared_layers", self.n_shared_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Dropout source. `eval()` disables it; training draws masks from its own
/// stream so runs stay reproducible.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else { return x };
        let (r, c) = g.value(x).shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..r * c).map(|_| if rng.gen_bool(rate) { 0.0 } else { keep }).collect();
        g.mul_const(x, Mat::from_vec(r, c, mask))
    }
}

/// Affine map `x W + b` with `W: (in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), Mat::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Same map with the parameters entering as constants.
    pub fn forward_frozen(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.frozen(self.w);
        let b = g.frozen(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.w);
        let mut out = store.get(self.b).data().to_vec();
        for (i, &xv) in x.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(w.row(i)) {
                *o += xv * wv;
            }
        }
        out
    }
}

/// Post-norm transformer layer: self-attention → add & norm → feed-forward
/// → add & norm.
#[derive(Clone, Debug)]
pub struct Block {
    n_heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff1: Linear,
    ff2: Linear,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            n_heads: cfg.n_heads,
            q: Linear::new(store, &format!("{name}.attn_q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.attn_k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.attn_v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.attn_o"), d, d, rng),
            ln1_gain: store.add(format!("{name}.ln1.gain"), Mat::filled(1, d, 1.0)),
            ln1_bias: store.add(format!("{name}.ln1.bias"), Mat::zeros(1, d)),
            ff1: Linear::new(store, &format!("{name}.ffn_in"), d, cfg.ffn_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_dim, d, rng),
            ln2_gain: store.add(format!("{name}.ln2.gain"), Mat::filled(1, d, 1.0)),
            ln2_bias: store.add(format!("{name}.ln2.bias"), Mat::zeros(1, d)),
        }
    }

    /// Full-sequence forward pass.
    pub fn forward(&self, g: &mut Graph, x: Var, allowed: &[bool], dropout: &mut Dropout) -> Var {
        self.forward_queries(g, x, x, allowed, dropout)
    }

    /// Output at the CLS position only. Identical to row 0 of
    /// [`Block::forward`], at a fraction of the cost.
    pub fn forward_cls(&self, g: &mut Graph, x: Var, allowed: &[bool], dropout: &mut Dropout) -> Var {
        let cls = g.slice_rows(x, 0, 1);
        self.forward_queries(g, cls, x, allowed, dropout)
    }

    fn forward_queries(&self, g: &mut Graph, queries: Var, x: Var, allowed: &[bool], dropout: &mut Dropout) -> Var {
        let d = g.value(x).cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_masked(scores, Some(allowed));
            heads.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&heads);
        let attn_out = self.o.forward(g, merged);
        let attn_out = dropout.apply(g, attn_out);
        let res1 = g.add(queries, attn_out);
        let x1 = self.norm(g, res1, self.ln1_gain, self.ln1_bias);
        let hidden = self.ff1.forward(g, x1);
        let hidden = g.gelu(hidden);
        let ff = self.ff2.forward(g, hidden);
        let ff = dropout.apply(g, ff);
        let res2 = g.add(x1, ff);
        self.norm(g, res2, self.ln2_gain, self.ln2_bias)
    }

    fn norm(&self, g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(gain);
        let bias = g.param(bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

/// Sinusoidal position table of shape `(max_len, d)`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// The three legal-factor vectors of one case (article, charge, term).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSet {
    pub factors: [Vec<f64>; 3],
}

/// Shared encoder and the three factor layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed: ParamId,
    layers: Vec<Block>,
    factor_layers: [Block; 3],
    positions: Mat,
}

/// Parameter-name prefixes owned by the factor extractor.
pub const EXTRACTOR_PREFIXES: [&str; 2] = ["enc.", "factor"];

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(cfg.seed, "encoder");
        let d = cfg.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let table = (0..cfg.vocab_size * d).map(|_| rng.gen_range(-bound..bound)).collect();
        let embed = store.add("enc.embed", Mat::from_vec(cfg.vocab_size, d, table));
        let layers = (0..cfg.n_shared_layers)
            .map(|i| Block::new(store, &format!("enc.layer{i}"), cfg, &mut rng))
            .collect();
        let factor_layers = [1, 2, 3].map(|k| {
            let mut rng = seed::rng(cfg.seed, &format!("factor{k}"));
            Block::new(store, &format!("factor{k}"), cfg, &mut rng)
        });
        Ok(Self { cfg: cfg.clone(), embed, layers, factor_layers, positions: sinusoidal_positions(cfg.max_len, d) })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::Invalid(format!("sequence length {} exceeds max_len {}", tokens.len(), self.cfg.max_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} out of range for vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    /// Shared encoder output, shape `(len, d_model)`; PAD positions are
    /// excluded as attention keys.
    pub fn encode(&self, g: &mut Graph, tokens: &[u32], dropout: &mut Dropout) -> Result<Var> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let allowed = key_mask(tokens);
        let emb = g.embed(self.embed, &ids);
        let pos = g.constant(Mat::from_vec(
            ids.len(),
            self.cfg.d_model,
            self.positions.data()[..ids.len() * self.cfg.d_model].to_vec(),
        ));
        let mut h = g.add(emb, pos);
        h = dropout.apply(g, h);
        for layer in &self.layers {
            h = layer.forward(g, h, &allowed, dropout);
        }
        Ok(h)
    }

    /// `f_k` = CLS row of factor layer `k` applied to the shared output.
    pub fn extract_factors(&self, g: &mut Graph, hidden: Var, tokens: &[u32], dropout: &mut Dropout) -> [Var; 3] {
        let allowed = key_mask(tokens);
        [0, 1, 2].map(|k| self.factor_layers[k].forward_cls(g, hidden, &allowed, dropout))
    }

    pub fn factors(&self, g: &mut Graph, tokens: &[u32], dropout: &mut Dropout) -> Result<[Var; 3]> {
        let h = self.encode(g, tokens, dropout)?;
        Ok(self.extract_factors(g, h, tokens, dropout))
    }

    /// Eval-mode factor vectors.
    pub fn factor_set(&self, store: &ParamStore, tokens: &[u32]) -> Result<FactorSet> {
        let mut g = Graph::new(store);
        let f = self.factors(&mut g, tokens, &mut Dropout::eval())?;
        Ok(FactorSet { factors: f.map(|v| g.value(v).data().to_vec()) })
    }

    pub fn factor_layer(&self, k: usize) -> &Block {
        &self.factor_layers[k]
    }
}

fn key_mask(tokens: &[u32]) -> Vec<bool> {
    tokens.iter().map(|&t| t != PAD).collect()
}
