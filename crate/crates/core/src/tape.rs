//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D array `[rows, cols]`. The denoiser only
//! ever needs token sequences `[tokens, features]`, so that is all this
//! supports. Nodes are appended in evaluation order and `backward` walks
//! them in reverse.

use std::borrow::Cow;
use std::fmt::Debug;
use std::ops::AddAssign;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Floating point element usable on the tape (`f32` for training, `f64` for
/// gradient checking).
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + AddAssign + Debug + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + row` with `row` of shape `[1, cols]`.
    AddRow(Var, Var),
    /// `a ⊙ row`, broadcasting a `[1, cols]` row over every row of `a`.
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    /// Row-wise normalisation without affine; caches `1/σ` per row.
    LayerNorm(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    /// Mean squared error against a constant target, `[1, 1]` result.
    Mse(Var, Var),
    /// Sum of all entries, `[1, 1]` result.
    Sum(Var),
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, Array2<F>>,
    op: Op,
    requires_grad: bool,
    cache: Option<Array1<F>>,
}

/// Recording of a computation, borrowing parameter storage for `'a`.
pub struct Tape<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
    layer_norm_eps: F,
}

impl<F: Scalar> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F: Scalar> {
    slots: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed there.
    pub fn take_or_zeros(&mut self, v: Var, like: (usize, usize)) -> Array2<F> {
        self.slots
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Array2::zeros(like))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            layer_norm_eps: F::lit(1e-5),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            cache: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Trainable leaf borrowing `value`.
    pub fn param(&mut self, value: &'a Array2<F>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
            cache: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf borrowing `value`.
    pub fn frozen(&mut self, value: &'a Array2<F>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
            cache: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable owned leaf.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a [1, n] row");
        let out = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a [1, n] row");
        let out = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * F::lit(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::lit(GELU_C);
        let k = F::lit(0.044715);
        let half = F::lit(0.5);
        let out = self
            .value(a)
            .mapv(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x / (F::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let n = F::from_usize(cols).unwrap();
        let mut out = Array2::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for ((xr, mut yr), is) in x.outer_iter().zip(out.outer_iter_mut()).zip(inv_std.iter_mut()) {
            let mean = xr.sum() / n;
            let var = xr.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let r = F::one() / (var + self.layer_norm_eps).sqrt();
            Zip::from(&mut yr).and(&xr).for_each(|y, &v| *y = (v - mean) * r);
            *is = r;
        }
        let rg = self.rg(&[a]);
        let v = self.push(out, Op::LayerNorm(a), rg);
        self.nodes[v.0].cache = Some(inv_std);
        v
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.outer_iter_mut() {
            let m = row.fold(F::neg_infinity(), |acc, &v| acc.max(v));
            let mut sum = F::zero();
            row.mapv_inplace(|v| {
                let e = (v - m).exp();
                sum += e;
                e
            });
            let inv = F::one() / sum;
            row.mapv_inplace(|v| v * inv);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts agree");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts agree");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `mean((a - target)²)`; no gradient flows into `target`.
    pub fn mse(&mut self, a: Var, target: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(target), "mse shape mismatch");
        let n = F::from_usize(self.value(a).len()).unwrap();
        let mut acc = F::zero();
        Zip::from(self.value(a))
            .and(self.value(target))
            .for_each(|&x, &y| acc += (x - y) * (x - y));
        let out = Array2::from_elem((1, 1), acc / n);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mse(a, target), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Reverse sweep from a `[1, 1]` scalar node.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut g: Vec<Option<Array2<F>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = g[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    g[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = dy.dot(&self.value(*b).t());
                        accumulate(&mut g, *a, da);
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).t().dot(&dy);
                        accumulate(&mut g, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs(*a) {
                        let da = dy.dot(self.value(*b));
                        accumulate(&mut g, *a, da);
                    }
                    if self.needs(*b) {
                        let db = dy.t().dot(self.value(*a));
                        accumulate(&mut g, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut g, *b, dy.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut g, *a, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut g, *b, dy.mapv(|v| -v));
                    }
                    if self.needs(*a) {
                        accumulate(&mut g, *a, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut g, *a, &dy * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut g, *b, &dy * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut g, *row, dr);
                    }
                    if self.needs(*a) {
                        accumulate(&mut g, *a, dy);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.needs(*row) {
                        let dr = (&dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut g, *row, dr);
                    }
                    if self.needs(*a) {
                        accumulate(&mut g, *a, dy * self.value(*row));
                    }
                }
                Op::Scale(a, s) => {
                    if self.needs(*a) {
                        accumulate(&mut g, *a, dy * F::lit(*s));
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(*a) {
                        let c = F::lit(GELU_C);
                        let k = F::lit(0.044715);
                        let half = F::lit(0.5);
                        let three_k = F::lit(3.0 * 0.044715);
                        let mut da = dy;
                        Zip::from(&mut da).and(self.value(*a)).for_each(|d, &x| {
                            let u = c * (x + k * x * x * x);
                            let th = u.tanh();
                            let du = c * (F::one() + three_k * x * x);
                            let dgelu = half * (F::one() + th) + half * x * (F::one() - th * th) * du;
                            *d = *d * dgelu;
                        });
                        accumulate(&mut g, *a, da);
                    }
                }
                Op::Silu(a) => {
                    if self.needs(*a) {
                        let mut da = dy;
                        Zip::from(&mut da).and(self.value(*a)).for_each(|d, &x| {
                            let sig = F::one() / (F::one() + (-x).exp());
                            *d = *d * sig * (F::one() + x * (F::one() - sig));
                        });
                        accumulate(&mut g, *a, da);
                    }
                }
                Op::LayerNorm(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let inv_std = node.cache.as_ref().expect("layer norm cache");
                        let n = F::from_usize(y.ncols()).unwrap();
                        let mut da = dy;
                        for ((mut dr, yr), &r) in da.outer_iter_mut().zip(y.outer_iter()).zip(inv_std.iter()) {
                            let mean_d = dr.sum() / n;
                            let mean_dy = dr.iter().zip(yr.iter()).fold(F::zero(), |acc, (&d, &yv)| acc + d * yv) / n;
                            Zip::from(&mut dr)
                                .and(&yr)
                                .for_each(|d, &yv| *d = r * (*d - mean_d - yv * mean_dy));
                        }
                        accumulate(&mut g, *a, da);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let mut da = dy;
                        for (mut dr, yr) in da.outer_iter_mut().zip(y.outer_iter()) {
                            let dot = dr.iter().zip(yr.iter()).fold(F::zero(), |acc, (&d, &yv)| acc + d * yv);
                            Zip::from(&mut dr).and(&yr).for_each(|d, &yv| *d = yv * (*d - dot));
                        }
                        accumulate(&mut g, *a, da);
                    }
                }
                Op::SliceCols(a, start) => {
                    if self.needs(*a) {
                        let mut da = Array2::zeros(self.shape(*a));
                        let w = dy.ncols();
                        da.slice_mut(s![.., *start..*start + w]).assign(&dy);
                        accumulate(&mut g, *a, da);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.needs(*p) {
                            accumulate(&mut g, *p, dy.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    if self.needs(*a) {
                        let mut da = Array2::zeros(self.shape(*a));
                        let h = dy.nrows();
                        da.slice_mut(s![*start..*start + h, ..]).assign(&dy);
                        accumulate(&mut g, *a, da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if self.needs(*p) {
                            accumulate(&mut g, *p, dy.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::Mse(a, target) => {
                    if self.needs(*a) {
                        let n = F::from_usize(self.value(*a).len()).unwrap();
                        let k = dy[[0, 0]] * F::lit(2.0) / n;
                        let da = (self.value(*a) - self.value(*target)) * k;
                        accumulate(&mut g, *a, da);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let da = Array2::from_elem(self.shape(*a), dy[[0, 0]]);
                        accumulate(&mut g, *a, da);
                    }
                }
            }
        }
        Grads { slots: g }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate<F: Scalar>(g: &mut [Option<Array2<F>>], v: Var, delta: Array2<F>) {
    match &mut g[v.0] {
        Some(acc) => *acc += &delta,
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.param(x);
            let out = build(&mut t, v);
            t.value(out)[[0, 0]]
        };
        let mut t = Tape::new();
        let v = t.param(&x);
        let out = build(&mut t, v);
        let mut grads = t.backward(out);
        let analytic = grads.take_or_zeros(v, x.dim());
        let numeric = numeric_grad(&x, eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    fn weights(rows: usize, cols: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let w = weights(3, 4, 0.1);
        let b = weights(1, 4, 0.5);
        check(weights(5, 3, 0.2), |t, x| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let y = t.matmul(x, w);
            let y = t.add_row(y, b);
            let y = t.gelu(y);
            let target = t.constant(Array2::zeros((5, 4)));
            t.mse(y, target)
        });
    }

    #[test]
    fn attention_pattern_gradients() {
        let probe = weights(4, 6, 0.9);
        check(weights(4, 6, 0.3), |t, x| {
            let n = t.layer_norm(x);
            let q = t.slice_cols(n, 0, 3);
            let k = t.slice_cols(n, 3, 6);
            let s = t.matmul_nt(q, k);
            let s = t.scale(s, 0.5);
            let p = t.softmax_rows(s);
            let o = t.matmul(p, k);
            let o = t.concat_cols(&[o, q]);
            let probe = t.constant(probe.clone());
            let y = t.mul(o, probe);
            t.sum(y)
        });
    }

    #[test]
    fn row_broadcast_gradients() {
        let a = weights(5, 3, 0.4);
        check(weights(1, 3, 0.8), |t, r| {
            let a = t.constant(a.clone());
            let y = t.mul_row(a, r);
            let y = t.mul_row(y, r);
            let y = t.silu(y);
            t.sum(y)
        });
        let r = weights(1, 3, 0.6);
        check(weights(5, 3, 0.2), |t, x| {
            let r = t.constant(r.clone());
            let y = t.mul_row(x, r);
            let target = t.constant(Array2::ones((5, 3)));
            t.mse(y, target)
        });
    }

    #[test]
    fn row_slicing_and_silu_gradients() {
        check(weights(6, 2, 0.7), |t, x| {
            let top = t.slice_rows(x, 0, 3);
            let bottom = t.slice_rows(x, 3, 6);
            let d = t.sub(top, bottom);
            let d = t.silu(d);
            let y = t.concat_rows(&[d, top]);
            let y = t.mul(y, y);
            t.sum(y)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let c = array![[1.0, 2.0]];
        let p = array![[3.0, 4.0]];
        let mut t: Tape<f64> = Tape::new();
        let cv = t.frozen(&c);
        let pv = t.param(&p);
        let y = t.mul(cv, pv);
        let y = t.sum(y);
        let g = t.backward(y);
        assert!(g.get(cv).is_none());
        assert_eq!(g.get(pv).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.constant(array![[1000.0, 1000.0], [0.0, -1.0]]);
        let p = t.softmax_rows(x);
        for row in t.value(p).outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
