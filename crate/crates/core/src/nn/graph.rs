//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass and
//! replays them backwards in [`Graph::backward`]. Parameters are read from a
//! borrowed [`ParamSet`]; gradients come back indexed by [`ParamId`].

use std::rc::Rc;

use super::{Matrix, ParamId, ParamSet};
use crate::geometry::nearest_neighbors;

/// Marks a zero row in [`Graph::gather_rows`].
pub const PAD: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulTN(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    RowSum(Var),
    Gather(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    /// Per output element, the source row that won the max (`PAD` if none).
    IndexedMax(Var, Vec<usize>),
    SegmentSum(Var, Rc<Vec<usize>>),
    SoftmaxRows(Var),
    ColNormalize(Var),
    LayerNorm(Var, Vec<f64>),
    BatchNorm(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        probs: Matrix,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GroupedLinear {
        x: Var,
        w: Var,
        groups: usize,
    },
    Chamfer {
        pred: Var,
        target: Rc<Matrix>,
        fwd: Vec<usize>,
        bwd: Vec<usize>,
    },
    Emd {
        pred: Var,
        target: Rc<Matrix>,
        assignment: Vec<usize>,
    },
    StraightThrough(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Parameter gradients from one backward pass, indexed like the
/// [`ParamSet`].
pub struct Gradients {
    pub params: Vec<Option<Matrix>>,
    /// Gradients of any extra variables requested via
    /// [`Graph::backward_with`].
    pub extra: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].as_ref()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients are tracked for, e.g. an input whose gradient
    /// is inspected in a test.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let params = self.params;
        self.nodes.push(Node {
            value: params.get(id).clone(),
            op: Op::Param(id),
            needs_grad: params.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_tn(self.value(b));
        self.push(value, Op::MatMulTN(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNT(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row expects a 1 x C row");
        let mut value = x.clone();
        for i in 0..value.rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "mul_row expects a 1 x C row");
        let mut value = x.clone();
        for i in 0..value.rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *v *= b;
            }
        }
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    /// Multiplies row `i` of `a` by `col[i]` for an `R x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!((c.rows, c.cols), (x.rows, 1), "mul_col expects an R x 1 column");
        let mut value = x.clone();
        for i in 0..value.rows {
            let s = c.data[i];
            value.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        self.push(value, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| gelu(v).0);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    /// Sum of all entries as a `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `R x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_vec(x.rows, 1, (0..x.rows).map(|i| x.row(i).iter().sum()).collect());
        self.push(value, Op::RowSum(a), &[a])
    }

    /// Rows of `a` by index; [`PAD`] yields a zero row.
    pub fn gather_rows(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(indices.len(), x.cols);
        for (r, &src) in indices.iter().enumerate() {
            if src != PAD {
                value.row_mut(r).copy_from_slice(x.row(src));
            }
        }
        self.push(value, Op::Gather(a, indices), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.gather_rows(a, Rc::new((start..start + len).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let x = self.value(p);
                assert_eq!(x.rows, rows, "concat_cols row mismatch");
                value.row_mut(r)[off..off + x.cols].copy_from_slice(x.row(r));
                off += x.cols;
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&x.data);
            rows += x.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let value = Matrix::from_vec(rows, cols, x.data.clone());
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    /// `out[i, c] = max over t < k of a[nbr[i*k + t], c]`.
    pub fn neighbor_max(&mut self, a: Var, nbr: &[usize], k: usize) -> Var {
        let x = self.value(a);
        assert!(k > 0 && nbr.len() % k == 0, "neighbor list must be a multiple of k");
        let n = nbr.len() / k;
        let mut value = Matrix::filled(n, x.cols, f64::NEG_INFINITY);
        let mut arg = vec![PAD; n * x.cols];
        for i in 0..n {
            let out = &mut value.data[i * x.cols..(i + 1) * x.cols];
            let am = &mut arg[i * x.cols..(i + 1) * x.cols];
            for &j in &nbr[i * k..(i + 1) * k] {
                for (c, &v) in x.row(j).iter().enumerate() {
                    if v > out[c] {
                        out[c] = v;
                        am[c] = j;
                    }
                }
            }
        }
        self.push(value, Op::IndexedMax(a, arg), &[a])
    }

    /// Column-wise max over the rows of each segment. Empty segments give a
    /// zero row.
    pub fn segment_max(&mut self, a: Var, segment: &[usize], segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(segment.len(), x.rows, "one segment id per row");
        let mut value = Matrix::filled(segments, x.cols, f64::NEG_INFINITY);
        let mut arg = vec![PAD; segments * x.cols];
        for (r, &s) in segment.iter().enumerate() {
            let base = s * x.cols;
            for (c, &v) in x.row(r).iter().enumerate() {
                if v > value.data[base + c] {
                    value.data[base + c] = v;
                    arg[base + c] = r;
                }
            }
        }
        for (v, &a) in value.data.iter_mut().zip(&arg) {
            if a == PAD {
                *v = 0.0;
            }
        }
        self.push(value, Op::IndexedMax(a, arg), &[a])
    }

    pub fn segment_sum(&mut self, a: Var, segment: Rc<Vec<usize>>, segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(segment.len(), x.rows, "one segment id per row");
        let mut value = Matrix::zeros(segments, x.cols);
        for (r, &s) in segment.iter().enumerate() {
            for (o, &v) in value.row_mut(s).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        self.push(value, Op::SegmentSum(a, segment), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Divides each column by its sum.
    pub fn col_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums = col_sums(x);
        let mut value = x.clone();
        for r in 0..value.rows {
            for (v, s) in value.row_mut(r).iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        self.push(value, Op::ColNormalize(a), &[a])
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut rstds = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            rstds.push(rstd);
        }
        self.push(value, Op::LayerNorm(a, rstds), &[a])
    }

    /// Per-column standardization over the rows (batch statistics). Also
    /// returns the batch mean and biased variance per column.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let x = self.value(a);
        let n = x.rows as f64;
        let means: Vec<f64> = col_sums(x).iter().map(|s| s / n).collect();
        let mut vars = vec![0.0; x.cols];
        for r in 0..x.rows {
            for (c, v) in x.row(r).iter().enumerate() {
                vars[c] += (v - means[c]).powi(2);
            }
        }
        vars.iter_mut().for_each(|v| *v /= n);
        let rstd: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = x.clone();
        for r in 0..value.rows {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = (*v - means[c]) * rstd[c];
            }
        }
        let out = self.push(value, Op::BatchNorm(a, rstd), &[a]);
        (out, means, vars)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let x = self.value(logits);
        assert_eq!(targets.len(), x.rows, "one target per row");
        let probs = softmax_rows(x);
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -(probs.at(r, t).max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / x.rows as f64;
        self.push(
            Matrix::scalar(nll),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        )
    }

    /// Multi-head causal self-attention. `q`, `k`, `v` are
    /// `(batch * seq) x dim` with sequences stored contiguously; position
    /// `t` attends to positions `<= t` of its own sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qm.shape();
        assert_eq!(rows % batch, 0, "rows must split evenly into sequences");
        assert_eq!(dim % heads, 0, "dim must split evenly into heads");
        let seq = rows / batch;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(rows, dim);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for t in 0..seq {
                    let qt = &qm.row(b * seq + t)[off..off + dh];
                    let p = &mut probs[pbase + t * seq..pbase + (t + 1) * seq];
                    let mut mx = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let ks = &km.row(b * seq + s)[off..off + dh];
                        let sc = qt.iter().zip(ks).map(|(a, c)| a * c).sum::<f64>() * scale;
                        p[s] = sc;
                        mx = mx.max(sc);
                    }
                    let mut z = 0.0;
                    for ps in p.iter_mut().take(t + 1) {
                        *ps = (*ps - mx).exp();
                        z += *ps;
                    }
                    for ps in p.iter_mut().take(t + 1) {
                        *ps /= z;
                    }
                    let o = &mut out.row_mut(b * seq + t)[off..off + dh];
                    for s in 0..=t {
                        let vs = &vm.row(b * seq + s)[off..off + dh];
                        for (oi, vi) in o.iter_mut().zip(vs) {
                            *oi += p[s] * vi;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Row `r` of `x` is multiplied by weight block `r % groups` of `w`,
    /// where `w` stacks `groups` blocks of shape `in x out`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, groups: usize) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        let din = xm.cols;
        assert_eq!(wm.rows, groups * din, "weight must stack one block per group");
        let dout = wm.cols;
        let mut value = Matrix::zeros(xm.rows, dout);
        for r in 0..xm.rows {
            let g = r % groups;
            let out = &mut value.data[r * dout..(r + 1) * dout];
            for (i, &xi) in xm.row(r).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (o, &wv) in out.iter_mut().zip(wm.row(g * din + i)) {
                    *o += xi * wv;
                }
            }
        }
        self.push(value, Op::GroupedLinear { x, w, groups }, &[x, w])
    }

    /// Averaged squared-distance Chamfer loss between predicted points
    /// (`n x 3`) and a fixed target set.
    pub fn chamfer_loss(&mut self, pred: Var, target: Rc<Matrix>) -> Var {
        let p = self.value(pred).to_points();
        let t = target.to_points();
        let fwd_nn = nearest_neighbors(&p, &t);
        let bwd_nn = nearest_neighbors(&t, &p);
        let loss = fwd_nn.iter().map(|x| x.1).sum::<f64>() / p.len() as f64
            + bwd_nn.iter().map(|x| x.1).sum::<f64>() / t.len() as f64;
        self.push(
            Matrix::scalar(loss),
            Op::Chamfer {
                pred,
                target,
                fwd: fwd_nn.into_iter().map(|x| x.0).collect(),
                bwd: bwd_nn.into_iter().map(|x| x.0).collect(),
            },
            &[pred],
        )
    }

    /// Mean matched distance under a fixed assignment `pred[i] -> target[a[i]]`.
    pub fn emd_loss(&mut self, pred: Var, target: Rc<Matrix>, assignment: Vec<usize>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.rows, assignment.len(), "one assignment per predicted point");
        let loss = (0..p.rows)
            .map(|i| dist3(p.row(i), target.row(assignment[i])))
            .sum::<f64>()
            / p.rows as f64;
        self.push(
            Matrix::scalar(loss),
            Op::Emd {
                pred,
                target,
                assignment,
            },
            &[pred],
        )
    }

    /// Forward value `value`, gradient copied straight through to `a`.
    pub fn straight_through(&mut self, a: Var, value: Matrix) -> Var {
        assert_eq!(self.value(a).shape(), value.shape(), "straight-through shape mismatch");
        self.push(value, Op::StraightThrough(a), &[a])
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        self.backward_with(loss, &[])
    }

    /// Backpropagates from the scalar `loss`, also returning gradients for
    /// the `extra` variables.
    pub fn backward_with(&self, loss: Var, extra: &[Var]) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut param_grads: Vec<Option<Matrix>> = vec![None; self.params.len()];
        let mut extra_grads: Vec<Option<Matrix>> = vec![None; extra.len()];

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (slot, v) in extra_grads.iter_mut().zip(extra) {
                if v.0 == i {
                    *slot = Some(dy.clone());
                }
            }
            self.backprop_node(i, dy, &mut grads, &mut param_grads);
        }
        Gradients {
            params: param_grads,
            extra: extra_grads,
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        dy: Matrix,
        grads: &mut [Option<Matrix>],
        param_grads: &mut [Option<Matrix>],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let y = &self.nodes[i].value;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => match &mut param_grads[id.0] {
                Some(existing) => existing.add_assign(&dy),
                slot => *slot = Some(dy),
            },
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, dy.matmul_nt(val(*b)));
                }
                if wants(*b) {
                    acc(*b, val(*a).matmul_tn(&dy));
                }
            }
            Op::MatMulTN(a, b) => {
                if wants(*a) {
                    acc(*a, val(*b).matmul_nt(&dy));
                }
                if wants(*b) {
                    acc(*b, val(*a).matmul(&dy));
                }
            }
            Op::MatMulNT(a, b) => {
                if wants(*a) {
                    acc(*a, dy.matmul(val(*b)));
                }
                if wants(*b) {
                    acc(*b, dy.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if wants(*b) {
                    acc(*b, dy.clone());
                }
                acc(*a, dy);
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    acc(*b, dy.map(|v| -v));
                }
                acc(*a, dy);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, hadamard(&dy, val(*b)));
                }
                if wants(*b) {
                    acc(*b, hadamard(&dy, val(*a)));
                }
            }
            Op::AddRow(a, r) => {
                if wants(*r) {
                    acc(*r, Matrix::from_vec(1, dy.cols, col_sums(&dy)));
                }
                acc(*a, dy);
            }
            Op::MulRow(a, r) => {
                let rv = val(*r);
                if wants(*r) {
                    let prod = hadamard(&dy, val(*a));
                    acc(*r, Matrix::from_vec(1, dy.cols, col_sums(&prod)));
                }
                if wants(*a) {
                    let mut g = dy;
                    for row in 0..g.rows {
                        for (v, s) in g.row_mut(row).iter_mut().zip(&rv.data) {
                            *v *= s;
                        }
                    }
                    acc(*a, g);
                }
            }
            Op::MulCol(a, c) => {
                let cv = val(*c);
                if wants(*c) {
                    let x = val(*a);
                    let g: Vec<f64> = (0..dy.rows)
                        .map(|r| dy.row(r).iter().zip(x.row(r)).map(|(p, q)| p * q).sum())
                        .collect();
                    acc(*c, Matrix::from_vec(dy.rows, 1, g));
                }
                if wants(*a) {
                    let mut g = dy;
                    for r in 0..g.rows {
                        let s = cv.data[r];
                        g.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*a, g);
                }
            }
            Op::Scale(a, s) => acc(*a, dy.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, dy),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, zip_map(&dy, x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                acc(*a, zip_map(&dy, x, |g, x| if x > 0.0 { g } else { slope * g }));
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, zip_map(&dy, x, |g, x| g * gelu(x).1));
            }
            Op::Tanh(a) => acc(*a, zip_map(&dy, y, |g, t| g * (1.0 - t * t))),
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Matrix::filled(x.rows, x.cols, dy.item()));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let mut g = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let s = dy.data[r];
                    g.row_mut(r).iter_mut().for_each(|v| *v = s);
                }
                acc(*a, g);
            }
            Op::Gather(a, idx) => {
                let x = val(*a);
                let mut g = Matrix::zeros(x.rows, x.cols);
                for (r, &src) in idx.iter().enumerate() {
                    if src != PAD {
                        for (o, v) in g.row_mut(src).iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                }
                acc(*a, g);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = val(p).cols;
                    if wants(p) {
                        let mut g = Matrix::zeros(dy.rows, cols);
                        for r in 0..dy.rows {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        acc(p, g);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        let x = val(p);
                        acc(p, Matrix::from_vec(x.rows, x.cols, dy.data[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                let x = val(*a);
                acc(*a, Matrix::from_vec(x.rows, x.cols, dy.data));
            }
            Op::Transpose(a) => acc(*a, dy.transpose()),
            Op::IndexedMax(a, arg) => {
                let x = val(*a);
                let mut g = Matrix::zeros(x.rows, x.cols);
                let cols = dy.cols;
                for (e, &src) in arg.iter().enumerate() {
                    if src != PAD {
                        *g.at_mut(src, e % cols) += dy.data[e];
                    }
                }
                acc(*a, g);
            }
            Op::SegmentSum(a, seg) => {
                let x = val(*a);
                let mut g = Matrix::zeros(x.rows, x.cols);
                for (r, &s) in seg.iter().enumerate() {
                    g.row_mut(r).copy_from_slice(dy.row(s));
                }
                acc(*a, g);
            }
            Op::SoftmaxRows(a) => {
                let mut g = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                        *o = p * (q - dot);
                    }
                }
                acc(*a, g);
            }
            Op::ColNormalize(a) => {
                let x = val(*a);
                let sums = col_sums(x);
                let mut dots = vec![0.0; x.cols];
                for r in 0..x.rows {
                    for (c, (d, v)) in dy.row(r).iter().zip(x.row(r)).enumerate() {
                        dots[c] += d * v;
                    }
                }
                let mut g = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                        *o = dy.at(r, c) / sums[c] - dots[c] / (sums[c] * sums[c]);
                    }
                }
                acc(*a, g);
            }
            Op::LayerNorm(a, rstd) => {
                let mut g = Matrix::zeros(y.rows, y.cols);
                let n = y.cols as f64;
                for r in 0..y.rows {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let md = dr.iter().sum::<f64>() / n;
                    let mdy = dr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for (o, (d, yv)) in g.row_mut(r).iter_mut().zip(dr.iter().zip(yr)) {
                        *o = rstd[r] * (d - md - yv * mdy);
                    }
                }
                acc(*a, g);
            }
            Op::BatchNorm(a, rstd) => {
                let n = y.rows as f64;
                let md: Vec<f64> = col_sums(&dy).iter().map(|s| s / n).collect();
                let mdy: Vec<f64> = col_sums(&hadamard(&dy, y)).iter().map(|s| s / n).collect();
                let mut g = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                        *o = rstd[c] * (dy.at(r, c) - md[c] - y.at(r, c) * mdy[c]);
                    }
                }
                acc(*a, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = dy.item() / probs.rows as f64;
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    *g.at_mut(r, t) -= 1.0;
                }
                g.scale_assign(s);
                acc(*logits, g);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(&dy, val(*q), val(*k), val(*v), *batch, *heads, probs);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::GroupedLinear { x, w, groups } => {
                let (xm, wm) = (val(*x), val(*w));
                let din = xm.cols;
                if wants(*x) {
                    let mut g = Matrix::zeros(xm.rows, din);
                    for r in 0..xm.rows {
                        let grp = r % groups;
                        let dr = dy.row(r);
                        for (i, o) in g.row_mut(r).iter_mut().enumerate() {
                            *o = wm.row(grp * din + i).iter().zip(dr).map(|(a, b)| a * b).sum();
                        }
                    }
                    acc(*x, g);
                }
                if wants(*w) {
                    let mut g = Matrix::zeros(wm.rows, wm.cols);
                    for r in 0..xm.rows {
                        let grp = r % groups;
                        let dr = dy.row(r);
                        for (i, &xi) in xm.row(r).iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for (o, d) in g.row_mut(grp * din + i).iter_mut().zip(dr) {
                                *o += xi * d;
                            }
                        }
                    }
                    acc(*w, g);
                }
            }
            Op::Chamfer {
                pred,
                target,
                fwd,
                bwd,
            } => {
                let p = val(*pred);
                let s = dy.item();
                let (n, m) = (p.rows as f64, target.rows as f64);
                let mut g = Matrix::zeros(p.rows, 3);
                for (i, &j) in fwd.iter().enumerate() {
                    for d in 0..3 {
                        *g.at_mut(i, d) += s * 2.0 / n * (p.at(i, d) - target.at(j, d));
                    }
                }
                for (j, &i) in bwd.iter().enumerate() {
                    for d in 0..3 {
                        *g.at_mut(i, d) += s * 2.0 / m * (p.at(i, d) - target.at(j, d));
                    }
                }
                acc(*pred, g);
            }
            Op::Emd {
                pred,
                target,
                assignment,
            } => {
                let p = val(*pred);
                let s = dy.item() / p.rows as f64;
                let mut g = Matrix::zeros(p.rows, 3);
                for (i, &j) in assignment.iter().enumerate() {
                    let d = dist3(p.row(i), target.row(j));
                    if d > 0.0 {
                        for c in 0..3 {
                            *g.at_mut(i, c) = s * (p.at(i, c) - target.at(j, c)) / d;
                        }
                    }
                }
                acc(*pred, g);
            }
            Op::StraightThrough(a) => acc(*a, dy),
        }
    }
}

fn dist3(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn col_sums(x: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (s, v) in sums.iter_mut().zip(x.row(r)) {
            *s += v;
        }
    }
    sums
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn attention_backward(
    dout: &Matrix,
    qm: &Matrix,
    km: &Matrix,
    vm: &Matrix,
    batch: usize,
    heads: usize,
    probs: &[f64],
) -> (Matrix, Matrix, Matrix) {
    let (rows, dim) = qm.shape();
    let seq = rows / batch;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(rows, dim);
    let mut dk = Matrix::zeros(rows, dim);
    let mut dv = Matrix::zeros(rows, dim);
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (b * heads + h) * seq * seq;
            for t in 0..seq {
                let p = &probs[pbase + t * seq..pbase + (t + 1) * seq];
                let dot_row = &dout.row(b * seq + t)[off..off + dh];
                let mut weighted = 0.0;
                for s in 0..=t {
                    let vs = &vm.row(b * seq + s)[off..off + dh];
                    dp[s] = dot_row.iter().zip(vs).map(|(a, c)| a * c).sum();
                    weighted += p[s] * dp[s];
                    let dvs = &mut dv.row_mut(b * seq + s)[off..off + dh];
                    for (o, g) in dvs.iter_mut().zip(dot_row) {
                        *o += p[s] * g;
                    }
                }
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ks: Vec<f64> = km.row(b * seq + s)[off..off + dh].to_vec();
                    let qt: Vec<f64> = qm.row(b * seq + t)[off..off + dh].to_vec();
                    for (o, kv) in dq.row_mut(b * seq + t)[off..off + dh].iter_mut().zip(&ks) {
                        *o += ds * kv;
                    }
                    for (o, qv) in dk.row_mut(b * seq + s)[off..off + dh].iter_mut().zip(&qt) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
