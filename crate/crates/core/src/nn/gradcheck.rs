//! Central-difference checks of every backward rule.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares analytic input gradients of `f` with finite differences.
fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let params = ParamSet::new();
    let eval = |xs: &[Matrix]| {
        let mut g = Graph::new(&params);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new(&params);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward_with(loss, &vars);

    let h = 1e-6;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.extra[k].clone().unwrap_or_else(|| Matrix::zeros(x.rows, x.cols));
        for e in 0..x.len() {
            let mut plus = inputs.clone();
            plus[k].data[e] += h;
            let mut minus = inputs.clone();
            minus[k].data[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data[e];
            let tol = 1e-5 * (1.0 + numeric.abs().max(a.abs()));
            assert!((a - numeric).abs() < tol, "input {k} element {e}: analytic {a} numeric {numeric}");
        }
    }
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element contributes a distinct gradient.
fn project(g: &mut Graph, y: Var) -> Var {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = g.constant(random(r, c, &mut rng));
    let p = g.mul(y, w);
    g.sum(p)
}

#[test]
fn products() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(vec![random(3, 4, &mut rng), random(4, 2, &mut rng)], |g, v| {
        let y = g.matmul(v[0], v[1]);
        project(g, y)
    });
    check(vec![random(4, 3, &mut rng), random(4, 2, &mut rng)], |g, v| {
        let y = g.matmul_tn(v[0], v[1]);
        project(g, y)
    });
    check(vec![random(3, 4, &mut rng), random(2, 4, &mut rng)], |g, v| {
        let y = g.matmul_nt(v[0], v[1]);
        project(g, y)
    });
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random(3, 4, &mut rng), random(3, 4, &mut rng));
    let row = random(1, 4, &mut rng);
    let col = random(3, 1, &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let y = g.scale(m, 0.7);
        let y = g.add_scalar(y, 0.3);
        project(g, y)
    });
    check(vec![a.clone(), row.clone()], |g, v| {
        let y = g.add_row(v[0], v[1]);
        let y = g.mul_row(y, v[1]);
        project(g, y)
    });
    check(vec![a, col], |g, v| {
        let y = g.mul_col(v[0], v[1]);
        project(g, y)
    });
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(4, 5, &mut rng);
    check(vec![x.clone()], |g, v| {
        let y = g.relu(v[0]);
        project(g, y)
    });
    check(vec![x.clone()], |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        project(g, y)
    });
    check(vec![x.clone()], |g, v| {
        let y = g.gelu(v[0]);
        project(g, y)
    });
    check(vec![x], |g, v| {
        let y = g.tanh(v[0]);
        project(g, y)
    });
}

#[test]
fn reductions_and_indexing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(5, 3, &mut rng);
    check(vec![x.clone()], |g, v| {
        let y = g.row_sum(v[0]);
        let y = project(g, y);
        let m = g.mean(v[0]);
        g.add(y, m)
    });
    check(vec![x.clone()], |g, v| {
        let y = g.gather_rows(v[0], Rc::new(vec![4, 0, PAD, 0, 2]));
        project(g, y)
    });
    check(vec![x.clone(), random(5, 2, &mut rng)], |g, v| {
        let c = g.concat_cols(&[v[0], v[1]]);
        let t = g.transpose(c);
        let r = g.reshape(t, 1, 25);
        project(g, r)
    });
    check(vec![x.clone(), random(2, 3, &mut rng)], |g, v| {
        let c = g.concat_rows(&[v[0], v[1]]);
        let s = g.slice_rows(c, 2, 4);
        project(g, s)
    });
}

#[test]
fn pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(6, 4, &mut rng);
    check(vec![x.clone()], |g, v| {
        let y = g.neighbor_max(v[0], &[0, 1, 2, 3, 4, 5, 5, 1, 0], 3);
        project(g, y)
    });
    check(vec![x.clone()], |g, v| {
        let y = g.segment_max(v[0], &[0, 2, 2, 0, 3, 3], 4);
        project(g, y)
    });
    check(vec![x], |g, v| {
        let y = g.segment_sum(v[0], Rc::new(vec![1, 1, 0, 2, 0, 1]), 3);
        project(g, y)
    });
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(5, 4, &mut rng);
    check(vec![x.clone()], |g, v| {
        let y = g.softmax_rows(v[0]);
        project(g, y)
    });
    check(vec![x.map(|v| v.abs() + 0.5)], |g, v| {
        let y = g.col_normalize(v[0]);
        project(g, y)
    });
    check(vec![x.clone()], |g, v| {
        let y = g.layer_norm(v[0], 1e-5);
        project(g, y)
    });
    check(vec![x], |g, v| {
        let (y, _, _) = g.batch_norm(v[0], 1e-5);
        project(g, y)
    });
}

#[test]
fn cross_entropy_and_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check(vec![random(4, 5, &mut rng)], |g, v| g.cross_entropy(v[0], Rc::new(vec![0, 4, 2, 2])));
    let (q, k, val) = (random(6, 4, &mut rng), random(6, 4, &mut rng), random(6, 4, &mut rng));
    check(vec![q, k, val], |g, v| {
        let y = g.causal_attention(v[0], v[1], v[2], 2, 2);
        project(g, y)
    });
}

#[test]
fn grouped_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    check(vec![random(6, 3, &mut rng), random(9, 2, &mut rng)], |g, v| {
        let y = g.grouped_linear(v[0], v[1], 3);
        project(g, y)
    });
}

#[test]
fn point_set_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = Rc::new(random(5, 3, &mut rng));
    let t = target.clone();
    check(vec![random(4, 3, &mut rng)], move |g, v| g.chamfer_loss(v[0], t.clone()));
    let target4 = Rc::new(random(4, 3, &mut rng));
    check(vec![random(4, 3, &mut rng)], move |g, v| g.emd_loss(v[0], target4.clone(), vec![2, 0, 3, 1]));
}

#[test]
fn straight_through_copies_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(2, 3, &mut rng);
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let v = g.input(x);
    let code = Matrix::filled(2, 3, 0.5);
    let y = g.straight_through(v, code.clone());
    assert_eq!(g.value(y), &code);
    let s = g.sum(y);
    let grads = g.backward_with(s, &[v]);
    assert_eq!(grads.extra[0].as_ref().unwrap(), &Matrix::filled(2, 3, 1.0));
}

#[test]
fn parameter_gradients_and_adam_descend() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::new();
    let lin = Linear::new(&mut params, "lin", 3, 2, &mut rng);
    let x = random(8, 3, &mut rng);
    let target = random(8, 2, &mut rng);
    let loss_of = |params: &ParamSet| {
        let mut g = Graph::new(params);
        let xv = g.constant(x.clone());
        let t = g.constant(target.clone());
        let y = lin.forward(&mut g, xv);
        let d = g.sub(y, t);
        let sq = g.mul(d, d);
        let l = g.mean(sq);
        let grads = g.backward(l);
        (g.value(l).item(), grads)
    };

    // finite differences on the weight
    let (_, grads) = loss_of(&params);
    let gw = grads.param(lin.w).unwrap().clone();
    for e in 0..gw.len() {
        let mut p = params.clone();
        p.get_mut(lin.w).data[e] += 1e-6;
        let up = loss_of(&p).0;
        p.get_mut(lin.w).data[e] -= 2e-6;
        let down = loss_of(&p).0;
        assert!((gw.data[e] - (up - down) / 2e-6).abs() < 1e-6);
    }

    let start = loss_of(&params).0;
    let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &params);
    for _ in 0..200 {
        let (_, grads) = loss_of(&params);
        adam.step(&mut params, &grads.params);
    }
    assert!(loss_of(&params).0 < 0.5 * start);
}

#[test]
fn batch_norm_layer_tracks_running_stats() {
    let mut params = ParamSet::new();
    let bn = BatchNorm::new(&mut params, "bn", 2);
    let x = Matrix::from_vec(4, 2, vec![1.0, 10.0, 3.0, 10.0, 5.0, 14.0, 7.0, 14.0]);
    let mut stats = Vec::new();
    {
        let mut g = Graph::new(&params);
        let v = g.constant(x.clone());
        let y = bn.forward_train(&mut g, v, &mut stats);
        let col0: Vec<f64> = (0..4).map(|r| g.value(y).at(r, 0)).collect();
        assert!(col0.iter().sum::<f64>().abs() < 1e-9);
    }
    BatchNorm::commit(&mut params, &stats);
    let rm = params.get(bn.running_mean);
    assert!((rm.data[0] - 0.4).abs() < 1e-12);
    assert!((rm.data[1] - 1.2).abs() < 1e-12);
    let rv = params.get(bn.running_var);
    assert!((rv.data[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
}
