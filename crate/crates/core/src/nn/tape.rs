//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Gradients are
//! obtained by seeding one or more outputs with `∂loss/∂output` and walking
//! the tape backwards; parameter gradients come back as [`ParamGrads`] so
//! independent passes can be summed in a fixed order.

use super::matrix::gemm_acc;
use super::{DenseMatrix, ParamGrads, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    RowNorm(Var),
}

const ROW_NORM_EPS: f64 = 1e-5;

pub struct Tape<'p> {
    params: &'p ParamSet,
    ops: Vec<Op>,
    values: Vec<DenseMatrix>,
    param_vars: Vec<Option<Var>>,
}

pub struct Gradients {
    pub params: ParamGrads,
    nodes: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient with respect to a recorded node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&DenseMatrix> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape { params, ops: Vec::new(), values: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &DenseMatrix {
        match self.ops[v.0] {
            Op::Param(id) => self.params.value(id),
            _ => &self.values[v.0],
        }
    }

    pub fn input(&mut self, m: DenseMatrix) -> Var {
        self.push(Op::Input, m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Op::Param(id), DenseMatrix::zeros(0, 0));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, cb) = (self.value(a).rows, self.value(b).cols);
        let mut out = DenseMatrix::zeros(ra, cb);
        gemm_acc(1.0, self.value(a), false, self.value(b), false, &mut out);
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ra, rb) = (self.value(a).rows, self.value(b).rows);
        let mut out = DenseMatrix::zeros(ra, rb);
        gemm_acc(1.0, self.value(a), false, self.value(b), true, &mut out);
        self.push(Op::MatMulBt(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, out.cols), "bias shape");
        for r in 0..out.rows {
            for (x, bb) in out.row_mut(r).iter_mut().zip(&b.data) {
                *x += bb;
            }
        }
        self.push(Op::AddBias(a, bias), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(Op::Tanh(a), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let mut out = DenseMatrix::zeros(src.rows, len);
        for r in 0..src.rows {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(Op::Cols(a, start), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "row count mismatch in concat_cols");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = DenseMatrix::zeros(rows.len(), src.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(Op::Gather(a, rows.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "column count mismatch in concat_rows");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), DenseMatrix::from_vec(rows, cols, data))
    }

    /// Per-row standardization without affine parameters.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols as f64;
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + ROW_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        self.push(Op::RowNorm(a), out)
    }

    /// Back-propagates the given output seeds through the whole tape.
    pub fn backward(&self, seeds: &[(Var, &DenseMatrix)]) -> Gradients {
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.ops.len()];
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, |acc| acc.add_assign(g), g.shape());
        }
        let mut params = ParamGrads::zeros_like(self.params);

        for idx in (0..self.ops.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Input => {}
                Op::Param(id) => params.0[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, |acc| gemm_acc(1.0, &g, false, bv, true, acc), av.shape());
                    accumulate(&mut grads, *b, |acc| gemm_acc(1.0, av, true, &g, false, acc), bv.shape());
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, |acc| gemm_acc(1.0, &g, false, bv, false, acc), av.shape());
                    accumulate(&mut grads, *b, |acc| gemm_acc(1.0, &g, true, av, false, acc), bv.shape());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, |acc| acc.add_assign(&g), g.shape());
                    accumulate(&mut grads, *b, |acc| acc.add_assign(&g), g.shape());
                }
                Op::AddBias(a, bias) => {
                    accumulate(&mut grads, *a, |acc| acc.add_assign(&g), g.shape());
                    accumulate(
                        &mut grads,
                        *bias,
                        |acc| {
                            for r in 0..g.rows {
                                for (s, x) in acc.data.iter_mut().zip(g.row(r)) {
                                    *s += x;
                                }
                            }
                        },
                        (1, g.cols),
                    );
                }
                Op::Relu(a) => {
                    let out = &self.values[idx];
                    accumulate(
                        &mut grads,
                        *a,
                        |acc| {
                            for ((s, x), y) in acc.data.iter_mut().zip(&g.data).zip(&out.data) {
                                if *y > 0.0 {
                                    *s += x;
                                }
                            }
                        },
                        g.shape(),
                    );
                }
                Op::Tanh(a) => {
                    let out = &self.values[idx];
                    accumulate(
                        &mut grads,
                        *a,
                        |acc| {
                            for ((s, x), y) in acc.data.iter_mut().zip(&g.data).zip(&out.data) {
                                *s += x * (1.0 - y * y);
                            }
                        },
                        g.shape(),
                    );
                }
                Op::Scale(a, f) => {
                    accumulate(
                        &mut grads,
                        *a,
                        |acc| {
                            for (s, x) in acc.data.iter_mut().zip(&g.data) {
                                *s += f * x;
                            }
                        },
                        g.shape(),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let out = &self.values[idx];
                    accumulate(
                        &mut grads,
                        *a,
                        |acc| {
                            for r in 0..g.rows {
                                let (gy, y) = (g.row(r), out.row(r));
                                let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                                for ((s, gi), yi) in acc.row_mut(r).iter_mut().zip(gy).zip(y) {
                                    *s += yi * (gi - dot);
                                }
                            }
                        },
                        g.shape(),
                    );
                }
                Op::Cols(a, start) => {
                    let shape = self.value(*a).shape();
                    accumulate(
                        &mut grads,
                        *a,
                        |acc| {
                            for r in 0..g.rows {
                                for (s, x) in acc.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                                    *s += x;
                                }
                            }
                        },
                        shape,
                    );
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        accumulate(
                            &mut grads,
                            p,
                            |acc| {
                                for r in 0..g.rows {
                                    for (s, x) in acc.row_mut(r).iter_mut().zip(&g.row(r)[off..off + shape.1]) {
                                        *s += x;
                                    }
                                }
                            },
                            shape,
                        );
                        off += shape.1;
                    }
                }
                Op::Gather(a, rows) => {
                    let shape = self.value(*a).shape();
                    accumulate(
                        &mut grads,
                        *a,
                        |acc| {
                            for (i, &r) in rows.iter().enumerate() {
                                for (s, x) in acc.row_mut(r).iter_mut().zip(g.row(i)) {
                                    *s += x;
                                }
                            }
                        },
                        shape,
                    );
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let len = shape.0 * shape.1;
                        accumulate(
                            &mut grads,
                            p,
                            |acc| {
                                for (s, x) in acc.data.iter_mut().zip(&g.data[off..off + len]) {
                                    *s += x;
                                }
                            },
                            shape,
                        );
                        off += len;
                    }
                }
                Op::RowNorm(a) => {
                    let out = &self.values[idx];
                    let input = self.value(*a);
                    let c = g.cols as f64;
                    accumulate(
                        &mut grads,
                        *a,
                        |acc| {
                            for r in 0..g.rows {
                                let x = input.row(r);
                                let mean = x.iter().sum::<f64>() / c;
                                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                                let inv = 1.0 / (var + ROW_NORM_EPS).sqrt();
                                let (gy, y) = (g.row(r), out.row(r));
                                let mg = gy.iter().sum::<f64>() / c;
                                let mgy = gy.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / c;
                                for ((s, gi), yi) in acc.row_mut(r).iter_mut().zip(gy).zip(y) {
                                    *s += inv * (gi - mg - yi * mgy);
                                }
                            }
                        },
                        g.shape(),
                    );
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { params, nodes: grads }
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], v: Var, f: impl FnOnce(&mut DenseMatrix), shape: (usize, usize)) {
    let slot = grads[v.0].get_or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1));
    f(slot);
}
