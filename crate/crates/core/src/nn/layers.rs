use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_fan_in, Graph, Matrix, ParamId, ParamSet, Var};

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: params.add(format!("{name}.w"), init_fan_in(din, dout, rng)),
            b: params.add(format!("{name}.b"), Matrix::zeros(1, dout)),
        }
    }

    /// Same shape, every weight zero.
    pub fn zeroed(params: &mut ParamSet, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: params.add(format!("{name}.w"), Matrix::zeros(din, dout)),
            b: params.add(format!("{name}.b"), Matrix::zeros(1, dout)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    /// Plain evaluation without a graph.
    pub fn apply(&self, params: &ParamSet, x: &Matrix) -> Matrix {
        let mut out = x.matmul(params.get(self.w));
        let b = params.get(self.b);
        for r in 0..out.rows {
            for (v, bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        out
    }
}

/// Batch normalization over rows with learned scale and shift. Running
/// statistics live as non-trainable buffers.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics gathered in a training forward pass.
pub struct BatchStats {
    pub layer: BatchNorm,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: params.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
            running_mean: params.add_buffer(format!("{name}.running_mean"), Matrix::zeros(1, dim)),
            running_var: params.add_buffer(format!("{name}.running_var"), Matrix::filled(1, dim, 1.0)),
        }
    }

    /// Normalizes with batch statistics, pushing them onto `stats` for
    /// [`BatchNorm::commit`].
    pub fn forward_train(&self, g: &mut Graph, x: Var, stats: &mut Vec<BatchStats>) -> Var {
        let (n, mean, var) = g.batch_norm(x, BN_EPS);
        stats.push(BatchStats {
            layer: *self,
            mean,
            var,
        });
        self.affine(g, n)
    }

    /// Normalizes with running statistics.
    pub fn forward_eval(&self, g: &mut Graph, x: Var) -> Var {
        let (shift, scale) = self.eval_coefficients(g.params());
        let s = g.constant(scale);
        let t = g.constant(shift);
        let h = g.mul_row(x, s);
        let h = g.add_row(h, t);
        self.affine(g, h)
    }

    fn eval_coefficients(&self, params: &ParamSet) -> (Matrix, Matrix) {
        let mean = params.get(self.running_mean);
        let var = params.get(self.running_var);
        let scale = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
        let shift = Matrix::from_vec(
            1,
            mean.cols,
            mean.data.iter().zip(&scale.data).map(|(m, s)| -m * s).collect(),
        );
        (shift, scale)
    }

    fn affine(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let h = g.mul_row(x, gamma);
        g.add_row(h, beta)
    }

    /// Folds recorded batch statistics into the running buffers.
    pub fn commit(params: &mut ParamSet, stats: &[BatchStats]) {
        for s in stats {
            let rm = params.get_mut(s.layer.running_mean);
            for (r, m) in rm.data.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = params.get_mut(s.layer.running_var);
            for (r, v) in rv.data.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: params.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let h = g.mul_row(n, gamma);
        g.add_row(h, beta)
    }
}
