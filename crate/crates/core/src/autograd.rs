//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Parameters are
//! read from a borrowed [`ParamStore`]; a parameter may enter the tape either
//! as a trainable leaf ([`Graph::param`]) or as a constant
//! ([`Graph::frozen`]), in which case no gradient is ever reported for it.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Mat, LOG_CLAMP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embed { table: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    LogClamp(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new(), frozen: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Graph::input`]; reads better where no gradient is wanted.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter leaf, shared across repeated uses in this graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// Parameter value entering as a constant: gradients stop here.
    pub fn frozen(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Leaf);
        self.frozen.insert(id, v);
        v
    }

    /// Gathers rows `ids` of the embedding table `table`.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.store.get(table);
        let d = t.cols();
        let mut out = Mat::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `(1, n)` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let row = self.value(b);
        assert_eq!(row.rows(), 1);
        assert_eq!(row.cols(), self.value(a).cols());
        let mut v = self.value(a).clone();
        let row = self.value(b).data().to_vec();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&row) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Mat::from_vec(x.rows(), x.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `(1, n)` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let row = self.value(b).data().to_vec();
        assert_eq!(row.len(), self.value(a).cols());
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&row) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Mat) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), mask.shape());
        let data = x.data().iter().zip(mask.data()).map(|(p, q)| p * q).collect();
        let v = Mat::from_vec(x.rows(), x.cols(), data);
        self.push(v, Op::MulConst(a, mask))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax where columns with `allowed[c] == false` receive
    /// probability exactly zero.
    pub fn softmax_masked(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let keep = |c: usize| allowed.is_none_or(|m| m[c]);
            let max = (0..row.len()).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let dst = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..row.len() {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    dst[c] = e;
                    sum += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise standardization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = Mat::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                off += src.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(src.data());
        }
        let rows = data.len() / cols;
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let data = x.data()[start * x.cols()..end * x.cols()].to_vec();
        let out = Mat::from_vec(end - start, x.cols(), data);
        self.push(out, Op::SliceRows(a, start))
    }

    /// Elementwise `ln(max(x, LOG_CLAMP))`; zero gradient where clamped.
    pub fn log_clamp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(LOG_CLAMP).ln());
        self.push(v, Op::LogClamp(a))
    }

    /// Sum of all entries, as a `(1, 1)` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    /// `Σ_i x_i` over a list of same-shape values.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Entry `(r, c)` as a `(1, 1)` value.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let row = self.slice_rows(a, r, r + 1);
        self.slice_cols(row, c, c + 1)
    }

    /// Shannon entropy (nats) of each row of a probability matrix, summed.
    pub fn entropy_sum(&mut self, probs: Var) -> Var {
        let logp = self.log_clamp(probs);
        let plogp = self.mul(probs, logp);
        let s = self.sum(plogp);
        self.scale(s, -1.0)
    }

    pub fn backward(&self, output: Var) -> Gradients {
        let out = self.value(output);
        assert_eq!(out.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(1.0));
        let mut params: HashMap<ParamId, Mat> = HashMap::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    accumulate_owned(&mut params, *id, g.clone());
                }
                Op::Embed { table, ids } => {
                    let t = self.store.get(*table);
                    let entry = params.entry(*table).or_insert_with(|| Mat::zeros(t.rows(), t.cols()));
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in entry.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul_t(bv);
                    let gb = av.t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(bv);
                    let gb = g.t_matmul(av);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, column_sums(&g));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, self.value(*b));
                    let gb = hadamard(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, b) => {
                    let row = self.value(*b);
                    let av = self.value(*a);
                    let mut ga = g.clone();
                    let mut gb = Mat::zeros(1, row.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) * row.get(0, c));
                            gb.data_mut()[c] += g.get(r, c) * av.get(r, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, mask) => acc(&mut grads, *a, hadamard(&g, mask)),
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    acc(&mut grads, *a, Mat::from_vec(x.rows(), x.cols(), data));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = y.data().iter().zip(g.data()).map(|(&y, &gv)| gv * (1.0 - y * y)).collect();
                    acc(&mut grads, *a, Mat::from_vec(y.rows(), y.cols(), data));
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut gx = Mat::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (&pv, &gv)) in gx.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                            *o = pv * (gv - inner);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for (r, &s) in inv_std.iter().enumerate() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (o, (&yv, &gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = s * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(&mut grads, p, gp);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let gp = Mat::from_vec(r, c, g.data()[off..off + r * c].to_vec());
                        acc(&mut grads, p, gp);
                        off += r * c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut gx = Mat::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let mut gx = Mat::zeros(x.rows(), x.cols());
                    let c = x.cols();
                    gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, gx);
                }
                Op::LogClamp(a) => {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| if x > LOG_CLAMP { gv / x } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Mat::from_vec(x.rows(), x.cols(), data));
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Mat::filled(x.rows(), x.cols(), g.item()));
                }
            }
            grads[i] = Some(g);
        }

        Gradients { nodes: grads, params }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn accumulate_owned(params: &mut HashMap<ParamId, Mat>, id: ParamId, g: Mat) {
    match params.get_mut(&id) {
        Some(existing) => existing.add_assign(&g),
        None => {
            params.insert(id, g);
        }
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` when the output does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a trainable parameter (`None` if it never entered the
    /// graph through [`Graph::param`] or [`Graph::embed`]).
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> ParamGrads {
        ParamGrads { grads: self.params }
    }
}

/// Accumulated parameter gradients, keyed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: HashMap<ParamId, Mat>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: ParamGrads) {
        for (id, g) in other.grads {
            accumulate_owned(&mut self.grads, id, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.grads.retain(|id, _| keep(*id));
    }
}

/// Computes the forward value and gradient of `loss` without exposing the
/// tape. Returns `(value, grads)`.
pub fn value_and_grad<'s>(store: &'s ParamStore, build: impl FnOnce(&mut Graph<'s>) -> Var) -> (f64, ParamGrads) {
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    let value = g.value(loss).item();
    (value, g.backward(loss).into_params())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric(f: impl Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(op: impl Fn(&mut Graph, Var) -> Var, x: Mat) {
        let store = ParamStore::new();
        let weight = |i: usize| ((i * 7 % 5) as f64 - 2.0) * 0.3;
        let f = |input: &Mat| {
            let mut g = Graph::new(&store);
            let v = g.input(input.clone());
            let y = op(&mut g, v);
            let (r, c) = g.value(y).shape();
            let w = g.constant(Mat::from_vec(r, c, (0..r * c).map(weight).collect()));
            let prod = g.mul(y, w);
            let s = g.sum(prod);
            (g, s, v)
        };
        let (g, s, v) = f(&x);
        let analytic = g.backward(s).wrt(v).cloned().unwrap();
        let num = numeric(|m| { let (g, s, _) = f(m); g.value(s).item() }, &x);
        let err = analytic.max_abs_diff(&num);
        assert!(err < 1e-7, "max abs err {err}\n{analytic:?}\n{num:?}");
    }

    fn sample(r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|i| ((i as f64) * 0.731).sin() * 1.3).collect())
    }

    #[test]
    fn elementwise_ops() {
        check(|g, x| g.gelu(x), sample(3, 4));
        check(|g, x| g.tanh(x), sample(3, 4));
        check(|g, x| g.scale(x, -2.5), sample(2, 2));
        check(|g, x| g.mul(x, x), sample(2, 3));
        check(|g, x| { let s = g.softmax(x); g.log_clamp(s) }, sample(2, 5));
    }

    #[test]
    fn structural_ops() {
        check(|g, x| g.softmax(x), sample(3, 4));
        check(|g, x| g.layer_norm(x), sample(3, 6));
        check(|g, x| { let a = g.slice_cols(x, 1, 3); let b = g.slice_rows(x, 0, 1); let b = g.slice_cols(b, 0, 2); let b2 = g.concat_cols(&[b, b]); let a0 = g.slice_rows(a, 1, 2); let a0 = g.concat_cols(&[a0, a0]); g.mul(b2, a0) }, sample(3, 4));
        check(|g, x| g.matmul_t(x, x), sample(3, 4));
        check(|g, x| { let a = g.slice_rows(x, 1, 3); let b = g.tanh(x); g.concat_rows(&[a, x, b]) }, sample(3, 2));
        check(|g, x| { let t = g.constant(sample(4, 2)); g.matmul(x, t) }, sample(3, 4));
        check(|g, x| { let r = g.slice_rows(x, 0, 1); let a = g.add_row(x, r); g.mul_row(a, r) }, sample(3, 4));
        check(|g, x| g.entropy_sum(x), Mat::from_vec(1, 3, vec![0.2, 0.3, 0.5]));
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(sample(2, 4));
        let p = g.softmax_masked(x, Some(&[true, false, true, false]));
        let pv = g.value(p);
        for r in 0..2 {
            assert_eq!(pv.get(r, 1), 0.0);
            assert_eq!(pv.get(r, 3), 0.0);
            assert!((pv.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let u = store.add("u", Mat::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.frozen(u);
        let c = g.matmul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.param(w).is_some());
        assert!(grads.param(u).is_none());
    }

    #[test]
    fn shared_param_leaf_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::scalar(3.0));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let sq = g.mul(a, b);
        let grads = g.backward(sq);
        assert_eq!(grads.param(w).unwrap().item(), 6.0);
    }
}
