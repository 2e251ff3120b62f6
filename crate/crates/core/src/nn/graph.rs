//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants or references to entries of a [`ParamSet`]; calling
//! [`Graph::backward`] returns gradients aligned with that parameter set.
//! Graphs are cheap and single-owner, so batches are differentiated by
//! building one graph per sample (possibly on different threads) and
//! summing the resulting [`Gradients`].

use ndarray::{s, Array2, Axis, Zip};

use super::params::{Gradients, ParamId, ParamSet};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sqrt(Var),
    Square(Var),
    LnFloor(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SegmentMax(Var, Array2<usize>),
    Pick(Var, usize, usize),
    Dropout(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    /// A graph with no trainable leaves, for pure evaluation of losses.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self
            .params
            .expect("graph has no parameter set")
            .get(id)
            .clone();
        let v = self.push(value, Op::Param(id.index()));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT(a, b))
    }

    /// Elementwise sum; `b` may be `1×1`, `1×n`, `m×1` or full shape.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + &broadcast(self.value(b), self.value(a).dim());
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - &broadcast(self.value(b), self.value(a).dim());
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * &broadcast(self.value(b), self.value(a).dim());
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(Mat::from_elem((1, 1), k));
        self.add(a, c)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(value, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// `ln(max(a, floor))`; entries at or below the floor get zero gradient.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor).ln());
        self.push(value, Op::LnFloor(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut value = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        self.push(value, Op::LayerNormRows(a, rstd))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Column means, producing a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x
            .mean_axis(Axis(0))
            .expect("mean over empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Mat::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(value, Op::MeanAll(a))
    }

    /// Column-wise max over contiguous row segments. `bounds` holds the
    /// `segments + 1` row offsets; every segment must be non-empty.
    pub fn segment_max(&mut self, a: Var, bounds: &[usize]) -> Var {
        let x = self.value(a);
        let segs = bounds.len() - 1;
        let cols = x.ncols();
        let mut value = Mat::zeros((segs, cols));
        let mut arg = Array2::<usize>::zeros((segs, cols));
        for k in 0..segs {
            let (lo, hi) = (bounds[k], bounds[k + 1]);
            assert!(hi > lo, "empty segment {k}");
            for c in 0..cols {
                let mut best = lo;
                for r in lo + 1..hi {
                    if x[[r, c]] > x[[best, c]] {
                        best = r;
                    }
                }
                value[[k, c]] = x[[best, c]];
                arg[[k, c]] = best;
            }
        }
        self.push(value, Op::SegmentMax(a, arg))
    }

    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a)[[row, col]]);
        self.push(value, Op::Pick(a, row, col))
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, a: Var, mask: Mat) -> Var {
        let value = self.value(a) * &mask;
        self.push(value, Op::Dropout(a, mask))
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones(self.nodes[output.0].value.dim()));

        let mut result = match self.params {
            Some(p) => Gradients::zeros_like(p),
            None => Gradients::empty(),
        };

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => result.accumulate(*pid, &g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    let bshape = self.value(*b).dim();
                    acc(&mut grads, *b, reduce_to(&g, bshape));
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let bshape = self.value(*b).dim();
                    acc(&mut grads, *b, -reduce_to(&g, bshape));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = &g * &broadcast(bv, av.dim());
                    let db = reduce_to(&(&g * av), bv.dim());
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    Zip::from(&mut d).and(x).for_each(|d, &x| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Sqrt(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d /= 2.0 * y);
                    acc(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let d = g * &(self.value(*a) * 2.0);
                    acc(&mut grads, *a, d);
                }
                Op::LnFloor(a, floor) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d = if x > *floor { *d / x } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y * s);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s = drow.sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d -= y.exp() * s);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNormRows(a, rstd) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut d = g;
                    for ((mut drow, yrow), &r) in
                        d.rows_mut().into_iter().zip(y.rows()).zip(rstd.iter())
                    {
                        let sum_d = drow.sum();
                        let sum_dy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>();
                        Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| {
                            *dv = r / n * (n * *dv - sum_d - yv * sum_dy);
                        });
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + rows, ..]).to_owned());
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + cols]).to_owned());
                        off += cols;
                    }
                }
                Op::MeanRows(a) => {
                    let dim = self.value(*a).dim();
                    let d = broadcast(&g, dim) / dim.0 as f64;
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let dim = self.value(*a).dim();
                    acc(&mut grads, *a, Mat::from_elem(dim, g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let dim = self.value(*a).dim();
                    let k = g[[0, 0]] / (dim.0 * dim.1) as f64;
                    acc(&mut grads, *a, Mat::from_elem(dim, k));
                }
                Op::SegmentMax(a, arg) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for ((k, c), &r) in arg.indexed_iter() {
                        d[[r, c]] += g[[k, c]];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Pick(a, r, c) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d[[*r, *c]] = g[[0, 0]];
                    acc(&mut grads, *a, d);
                }
                Op::Dropout(a, mask) => acc(&mut grads, *a, g * mask),
            }
        }
        result
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot => *slot = Some(d),
    }
}

fn broadcast(b: &Mat, shape: (usize, usize)) -> Mat {
    if b.dim() == shape {
        b.clone()
    } else {
        b.broadcast(shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", b.dim(), shape))
            .to_owned()
    }
}

fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_gradients;
    use crate::nn::params::ParamSet;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut g = Graph::detached();
        let x = g.constant(array![[1.0, 2.0, 3.0], [-1e3, 0.0, 1e3]]);
        let y = g.softmax_rows(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let w = ps.add_normal("w", 4, 3, 0.7, &mut rng);
        let b = ps.add_normal("b", 1, 3, 0.7, &mut rng);
        let v = ps.add_normal("v", 3, 3, 0.7, &mut rng);
        let x = ps.add_normal("x", 5, 4, 1.0, &mut rng);

        let loss = |ps: &ParamSet| {
            let mut g = Graph::new(ps);
            let (w, b, v, x) = (g.param(w), g.param(b), g.param(v), g.param(x));
            let h = g.matmul(x, w);
            let h = g.add(h, b);
            let h = g.gelu(h);
            let n = g.layer_norm_rows(h, 1e-5);
            let s = g.matmul_nt(n, h);
            let a = g.softmax_rows(s);
            let o = g.matmul(a, h);
            let o = g.mul(o, b);
            let left = g.slice_cols(o, 0, 2);
            let right = g.slice_cols(o, 1, 2);
            let cat = g.concat_rows(&[left, right]);
            let top = g.slice_rows(cat, 2, 6);
            let cc = g.concat_cols(&[top, top]);
            let mx = g.segment_max(cc, &[0, 2, 3, 6]);
            let mr = g.mean_rows(mx);
            let lsm = g.log_softmax_rows(mr);
            let p = g.pick(lsm, 0, 1);
            let vv = g.matmul(o, v);
            let sq = g.square(vv);
            let sq = g.add_scalar(sq, 1.0);
            let rt = g.sqrt(sq);
            let ln = g.ln_floor(rt, 1e-8);
            let rt = g.add(rt, ln);
            let m = g.mean_all(rt);
            let sm = g.sum_all(vv);
            let sm = g.scale(sm, 0.1);
            let t = g.sub(m, p);
            let t = g.add(t, sm);
            (g.scalar(t), g.backward(t))
        };
        let report = check_param_gradients(&mut ps, loss, 1e-6);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
