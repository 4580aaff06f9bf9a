//! Analytic gradients against central finite differences, and forward kernels
//! against naive loop implementations.

use rand::Rng as _;

use sparseact::activations::{catalog, OperatorConstants, ParametricActivation, UnaryOperatorId};
use sparseact::engine::{grad_check, Graph, Tensor, TensorId};
use sparseact::network::Model;
use sparseact::rng;
use sparseact::training::gradient_flow;

fn random(r: &mut rng::Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(1.0)
}

fn all_ops() -> Vec<UnaryOperatorId> {
    let mut ops = catalog().to_vec();
    ops.push(UnaryOperatorId::ReLU);
    ops
}

fn near_kink(op: UnaryOperatorId, z: f64) -> bool {
    op.kinks().iter().any(|k| (z - k).abs() < 1e-3)
}

#[test]
fn operator_partials_match_finite_differences() {
    let consts = OperatorConstants::default();
    let h = 1e-6;
    let mut r = rng::stream(1, "op-fd", 0);
    for op in all_ops() {
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        while checked < 200 {
            let x = r.gen_range(-4.0..4.0);
            let alpha = r.gen_range(0.25..2.0);
            let beta = r.gen_range(0.25..2.0);
            if near_kink(op, beta * x) {
                continue;
            }
            let p = ParametricActivation::new(op, alpha, beta, true).unwrap();
            let g = p.eval_grads_with(&consts, x);
            let f = |a: f64, b: f64, x: f64| ParametricActivation::new(op, a, b, true).unwrap().eval_with(&consts, x);
            let dx = (f(alpha, beta, x + h) - f(alpha, beta, x - h)) / (2.0 * h);
            let da = (f(alpha + h, beta, x) - f(alpha - h, beta, x)) / (2.0 * h);
            let db = (f(alpha, beta + h, x) - f(alpha, beta - h, x)) / (2.0 * h);
            worst = worst.max(rel(g.dy_dx, dx)).max(rel(g.dy_dalpha, da)).max(rel(g.dy_dbeta, db));
            checked += 1;
        }
        assert!(worst < 1e-5, "{op}: worst relative error {worst}");
    }
}

/// `sum(c * out)` for fixed random `c`, so every output element matters.
fn weighted_sum(g: &mut Graph, out: TensorId, seed: u64) -> TensorId {
    let shape = g.shape(out).to_vec();
    let c = random(&mut rng::stream(seed, "weights", 0), shape, 1.0);
    let c = g.leaf(c);
    let prod = g.mul(out, c).unwrap();
    g.sum(prod)
}

#[test]
fn activation_layer_gradients() {
    let mut r = rng::stream(2, "act-layer", 0);
    for op in all_ops() {
        // Keep inputs away from kinks so differences stay on one branch.
        let mut data: Vec<f64> = Vec::new();
        while data.len() < 12 {
            let v = r.gen_range(-3.0..3.0);
            if !near_kink(op, 1.3 * v) && !near_kink(op, v) {
                data.push(v);
            }
        }
        let x = Tensor::new(vec![3, 4], data).unwrap();
        let through_input = grad_check(
            |g, x| {
                let a = g.leaf(Tensor::scalar(0.7));
                let b = g.leaf(Tensor::scalar(1.3));
                let y = g.activation(x, op, a, b)?;
                Ok(weighted_sum(g, y, 3))
            },
            &x,
            1e-6,
        )
        .unwrap();
        let xd = x.data().to_vec();
        let through_alpha = grad_check(
            |g, a| {
                let x = g.leaf(Tensor::new(vec![3, 4], xd.clone())?);
                let b = g.leaf(Tensor::scalar(1.3));
                let y = g.activation(x, op, a, b)?;
                Ok(weighted_sum(g, y, 3))
            },
            &Tensor::scalar(0.7),
            1e-6,
        )
        .unwrap();
        let through_beta = grad_check(
            |g, b| {
                let x = g.leaf(Tensor::new(vec![3, 4], xd.clone())?);
                let a = g.leaf(Tensor::scalar(0.7));
                let y = g.activation(x, op, a, b)?;
                Ok(weighted_sum(g, y, 3))
            },
            &Tensor::scalar(1.3),
            1e-6,
        )
        .unwrap();
        for (what, e) in [("x", through_input), ("alpha", through_alpha), ("beta", through_beta)] {
            assert!(e < 1e-5, "{op} via {what}: {e}");
        }
    }
}

#[test]
fn dense_gradients_in_every_argument() {
    let mut r = rng::stream(3, "dense", 0);
    let x = random(&mut r, vec![4, 5], 1.0);
    let w = random(&mut r, vec![5, 3], 1.0);
    let b = random(&mut r, vec![3], 1.0);
    let (xd, wd, bd) = (x.clone(), w.clone(), b.clone());
    let e_x = grad_check(
        |g, x| {
            let w = g.leaf(wd.clone());
            let b = g.leaf(bd.clone());
            let y = g.dense(x, w, b)?;
            Ok(weighted_sum(g, y, 1))
        },
        &x,
        1e-6,
    )
    .unwrap();
    let e_w = grad_check(
        |g, w| {
            let x = g.leaf(xd.clone());
            let b = g.leaf(bd.clone());
            let y = g.dense(x, w, b)?;
            Ok(weighted_sum(g, y, 1))
        },
        &w,
        1e-6,
    )
    .unwrap();
    let e_b = grad_check(
        |g, b| {
            let x = g.leaf(xd.clone());
            let w = g.leaf(wd.clone());
            let y = g.dense(x, w, b)?;
            Ok(weighted_sum(g, y, 1))
        },
        &b,
        1e-6,
    )
    .unwrap();
    assert!(e_x < 1e-6 && e_w < 1e-6 && e_b < 1e-6, "{e_x} {e_w} {e_b}");
}

#[test]
fn conv_gradients_in_every_argument() {
    for (stride, padding) in [(1, 0), (1, 2), (2, 1)] {
        let mut r = rng::stream(4, "conv", stride as u64 * 10 + padding as u64);
        let x = random(&mut r, vec![2, 2, 6, 6], 1.0);
        let k = random(&mut r, vec![3, 2, 3, 3], 1.0);
        let b = random(&mut r, vec![3], 1.0);
        let (xd, kd, bd) = (x.clone(), k.clone(), b.clone());
        let e_x = grad_check(
            |g, x| {
                let k = g.leaf(kd.clone());
                let b = g.leaf(bd.clone());
                let y = g.conv2d(x, k, b, stride, padding)?;
                Ok(weighted_sum(g, y, 2))
            },
            &x,
            1e-6,
        )
        .unwrap();
        let e_k = grad_check(
            |g, k| {
                let x = g.leaf(xd.clone());
                let b = g.leaf(bd.clone());
                let y = g.conv2d(x, k, b, stride, padding)?;
                Ok(weighted_sum(g, y, 2))
            },
            &k,
            1e-6,
        )
        .unwrap();
        let e_b = grad_check(
            |g, b| {
                let x = g.leaf(xd.clone());
                let k = g.leaf(kd.clone());
                let y = g.conv2d(x, k, b, stride, padding)?;
                Ok(weighted_sum(g, y, 2))
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(e_x < 1e-6 && e_k < 1e-6 && e_b < 1e-6, "stride {stride} pad {padding}: {e_x} {e_k} {e_b}");
    }
}

#[test]
fn pooling_reshape_and_loss_gradients() {
    let mut r = rng::stream(5, "pool", 0);
    let x = random(&mut r, vec![2, 3, 4, 6], 1.0);
    let e_pool = grad_check(
        |g, x| {
            let y = g.max_pool2d(x, 2)?;
            let y = g.flatten(y)?;
            Ok(weighted_sum(g, y, 4))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(e_pool < 1e-6, "max pool {e_pool}");
    let logits = random(&mut r, vec![5, 4], 3.0);
    let e_ce = grad_check(|g, z| g.softmax_cross_entropy(z, &[0, 3, 1, 1, 2]), &logits, 1e-6).unwrap();
    assert!(e_ce < 1e-5, "cross-entropy {e_ce}");
    let e_sq = grad_check(
        |g, x| {
            let y = g.square(x);
            let y = g.scale(y, 0.5);
            let z = g.add(y, x)?;
            Ok(g.sum(z))
        },
        &random(&mut r, vec![7], 2.0),
        1e-6,
    )
    .unwrap();
    assert!(e_sq < 1e-6, "elementwise {e_sq}");
}

fn model_loss(model: &Model, inputs: &[f64], labels: &[usize]) -> f64 {
    let mut g = Graph::with_constants(*model.constants());
    let pass = model.forward(&mut g, inputs, labels.len(), false).unwrap();
    let loss = g.softmax_cross_entropy(pass.logits, labels).unwrap();
    g.tensor(loss).item().unwrap()
}

/// Analytic parameter gradients of the full network loss.
fn model_grads(model: &Model, inputs: &[f64], labels: &[usize]) -> Vec<Vec<f64>> {
    let mut g = Graph::with_constants(*model.constants());
    let pass = model.forward(&mut g, inputs, labels.len(), true).unwrap();
    let loss = g.softmax_cross_entropy(pass.logits, labels).unwrap();
    g.backward(loss).unwrap();
    pass.params
        .iter()
        .flat_map(|&(w, b)| [w, b])
        .map(|id| g.grad(id).unwrap().to_vec())
        .collect()
}

/// Weight (`which == 0`) or bias storage of layer `li`.
fn param(model: &mut Model, li: usize, which: usize) -> &mut [f64] {
    let layer = &mut model.layers_mut()[li];
    if which == 0 {
        layer.weight.data_mut()
    } else {
        layer.bias.data_mut()
    }
}

/// Central differences of the loss in every weight and bias entry.
fn fd_grads(model: &mut Model, inputs: &[f64], labels: &[usize], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for li in 0..model.layers().len() {
        for which in 0..2 {
            let n = if which == 0 {
                model.layers()[li].weight.numel()
            } else {
                model.layers()[li].bias.numel()
            };
            let mut grads = Vec::with_capacity(n);
            for i in 0..n {
                let v = param(model, li, which)[i];
                param(model, li, which)[i] = v + h;
                let plus = model_loss(model, inputs, labels);
                param(model, li, which)[i] = v - h;
                let minus = model_loss(model, inputs, labels);
                param(model, li, which)[i] = v;
                grads.push((plus - minus) / (2.0 * h));
            }
            out.push(grads);
        }
    }
    out
}

#[test]
fn lenet_parameter_gradients_match_finite_differences() {
    let mut model = Model::build_lenet5(7);
    // Smooth operators keep every pre-activation away from kinks.
    model
        .set_activations(
            &[UnaryOperatorId::Swish, UnaryOperatorId::Tanh, UnaryOperatorId::Gelu, UnaryOperatorId::Softplus],
            None,
        )
        .unwrap();
    let mut r = rng::stream(7, "lenet-fd", 0);
    let inputs: Vec<f64> = (0..784).map(|_| r.gen_range(-1.0..2.0)).collect();
    let labels = [3];
    let analytic = model_grads(&model, &inputs, &labels);
    let numeric = fd_grads(&mut model, &inputs, &labels, 1e-5);
    assert_eq!(analytic.len(), numeric.len());
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a.iter().zip(n) {
            worst = worst.max(rel(a, n));
            count += 1;
        }
    }
    assert_eq!(count, 61_706);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradient_flow_matches_finite_difference_norm() {
    let mut model = Model::build_mlp(&[5, 7, 6, 3], 9).unwrap();
    model.set_activations(&[UnaryOperatorId::Tanh, UnaryOperatorId::Swish], None).unwrap();
    let mut r = rng::stream(9, "flow", 0);
    let inputs: Vec<f64> = (0..4 * 5).map(|_| r.gen_range(-2.0..2.0)).collect();
    let labels = [0, 2, 1, 2];
    let flow = gradient_flow(&model, &inputs, &labels).unwrap();
    let fd = fd_grads(&mut model, &inputs, &labels, 1e-6);
    let expected: f64 = fd.iter().flatten().map(|v| v * v).sum();
    assert!(flow.global >= 0.0);
    assert!((flow.global - expected).abs() <= 1e-3 * expected, "{} vs {expected}", flow.global);
    let per_layer: Vec<f64> = fd.chunks(2).map(|wb| wb.iter().flatten().map(|v| v * v).sum()).collect();
    // The last layer carries no activation, so it is absent from per_layer.
    for (got, want) in flow.per_layer.iter().zip(&per_layer) {
        assert!((got - want).abs() <= 1e-3 * want.max(1e-12), "{got} vs {want}");
    }
    assert_eq!(flow.per_layer.len(), 2);
}

fn naive_matmul(x: &[f64], w: &[f64], b: &[f64], batch: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * n_out];
    for i in 0..batch {
        for o in 0..n_out {
            let mut acc = b[o];
            for k in 0..n_in {
                acc += x[i * n_in + k] * w[k * n_out + o];
            }
            out[i * n_out + o] = acc;
        }
    }
    out
}

#[test]
fn dense_matches_naive_matmul() {
    let mut r = rng::stream(10, "matmul", 0);
    let x = random(&mut r, vec![4, 3], 1.0);
    let w = random(&mut r, vec![3, 2], 1.0);
    let b = random(&mut r, vec![2], 1.0);
    let want = naive_matmul(x.data(), w.data(), b.data(), 4, 3, 2);
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.leaf(x), g.leaf(w), g.leaf(b));
    let y = g.dense(xi, wi, bi).unwrap();
    for (a, e) in g.value(y).iter().zip(&want) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn sparse_dense_path_matches_naive_matmul() {
    let mut r = rng::stream(11, "matmul", 0);
    let x = random(&mut r, vec![6, 40], 1.0);
    let mut w = random(&mut r, vec![40, 30], 1.0);
    for v in w.data_mut().iter_mut() {
        if r.gen::<f64>() < 0.95 {
            *v = 0.0;
        }
    }
    let b = random(&mut r, vec![30], 1.0);
    let want = naive_matmul(x.data(), w.data(), b.data(), 6, 40, 30);
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.leaf(x), g.leaf(w), g.leaf(b));
    let y = g.dense(xi, wi, bi).unwrap();
    for (a, e) in g.value(y).iter().zip(&want) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    k: &[f64],
    b: &[f64],
    (n, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for bi in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let s = (j * stride + v) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * ci + c) * h + r as usize) * w + s as usize]
                                    * k[((o * ci + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    for (stride, pad, sparsity) in [(1, 0, 0.0), (1, 2, 0.0), (2, 1, 0.0), (1, 0, 0.9)] {
        let mut r = rng::stream(12, "conv-oracle", stride as u64 + pad as u64);
        let x = random(&mut r, vec![2, 3, 8, 8], 1.0);
        let mut k = random(&mut r, vec![4, 3, 5, 5], 1.0);
        for v in k.data_mut().iter_mut() {
            if r.gen::<f64>() < sparsity {
                *v = 0.0;
            }
        }
        let b = random(&mut r, vec![4], 1.0);
        let want = naive_conv(x.data(), k.data(), b.data(), (2, 3, 8, 8), (4, 5, 5), stride, pad);
        let mut g = Graph::new();
        let (xi, ki, bi) = (g.leaf(x), g.leaf(k), g.leaf(b));
        let y = g.conv2d(xi, ki, bi, stride, pad).unwrap();
        assert_eq!(g.value(y).len(), want.len());
        for (a, e) in g.value(y).iter().zip(&want) {
            assert!((a - e).abs() < 1e-10, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}
