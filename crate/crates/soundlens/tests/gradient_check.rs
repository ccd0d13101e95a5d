//! Reverse-mode gradients checked against central finite differences, one
//! primitive at a time, at randomly sampled points.
//!
//! Every check weights the primitive's output by a fixed random tensor
//! before reducing to a scalar, so the incoming adjoint is non-uniform and
//! the full adjoint rule is exercised, not just its row sums. Kinked
//! primitives are sampled away from their kinks (|x| > 1e-2), matching the
//! subgradient convention that makes the analytic and numeric answers
//! comparable everywhere else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soundlens::fd::{assert_tensors_close, fd_gradient_of_leaf};
use soundlens::graph::{Bindings, Graph, GraphBuilder, NodeId};
use soundlens::Tensor;

const POINTS: usize = 100;
const EPS: f64 = 1e-5;
const RTOL: f64 = 1e-5;
const ATOL: f64 = 1e-8;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Sample away from a kink at zero: coordinates with |x| <= radius are
/// resampled.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize], radius: f64) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() > radius {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weight `y` elementwise by a random constant and reduce to a scalar loss.
fn weighted_loss(gb: &mut GraphBuilder, y: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = gb.shape_of(y).to_vec();
    if shape.is_empty() {
        let c = gb.constant_scalar(rng.gen_range(0.5..1.5));
        return gb.scalar_scale(y, c).unwrap();
    }
    let w = gb.constant(rand_tensor(rng, &shape, 0.5, 1.5));
    let prod = gb.mul(y, w).unwrap();
    gb.sum(prod)
}

/// Check analytic vs finite-difference gradients for every listed leaf.
fn check_all(label: &str, graph: &Graph, bindings: &Bindings, leaves: &[&str]) {
    let exec = graph.forward(bindings).unwrap();
    let grads = exec.backward().unwrap();
    for leaf in leaves {
        let analytic = grads
            .get(leaf)
            .unwrap_or_else(|| panic!("{label}: no gradient for {leaf}"));
        let numeric = fd_gradient_of_leaf(graph, bindings, leaf, EPS)
            .unwrap_or_else(|e| panic!("{label}/{leaf}: fd failed: {e}"));
        assert_tensors_close(&format!("{label}/{leaf}"), analytic, &numeric, RTOL, ATOL);
    }
}

fn bindings(pairs: Vec<(&str, Tensor)>) -> Bindings {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Harness for a unary primitive: builds `loss = sum(op(x) . w)` and checks
/// d loss / dx at `POINTS` random points.
fn check_unary(
    label: &str,
    shape: &[usize],
    build: impl Fn(&mut GraphBuilder, NodeId) -> NodeId,
    sample: impl Fn(&mut ChaCha8Rng) -> Tensor,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed + label.len() as u64);
    let mut gb = GraphBuilder::new();
    let x = gb.param("x", shape.to_vec()).unwrap();
    let y = build(&mut gb, x);
    let loss = weighted_loss(&mut gb, y, &mut rng);
    let graph = gb.build_with_loss(loss).unwrap();
    for _ in 0..POINTS {
        let point = sample(&mut rng);
        check_all(label, &graph, &bindings(vec![("x", point)]), &["x"]);
    }
}

#[test]
fn grad_add_sub_mul() {
    let shape = [2, 3];
    for (label, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + which);
        let mut gb = GraphBuilder::new();
        let a = gb.param("a", shape.to_vec()).unwrap();
        let b = gb.param("b", shape.to_vec()).unwrap();
        let y = match which {
            0 => gb.add(a, b).unwrap(),
            1 => gb.sub(a, b).unwrap(),
            _ => gb.mul(a, b).unwrap(),
        };
        let loss = weighted_loss(&mut gb, y, &mut rng);
        let graph = gb.build_with_loss(loss).unwrap();
        for _ in 0..POINTS {
            let ba = rand_tensor(&mut rng, &shape, -2.0, 2.0);
            let bb = rand_tensor(&mut rng, &shape, -2.0, 2.0);
            check_all(
                label,
                &graph,
                &bindings(vec![("a", ba), ("b", bb)]),
                &["a", "b"],
            );
        }
    }
}

#[test]
fn grad_pow_square() {
    check_unary(
        "pow^2",
        &[3, 2],
        |gb, x| gb.pow(x, 2.0).unwrap(),
        |rng| rand_tensor(rng, &[3, 2], -2.0, 2.0),
    );
}

#[test]
fn grad_pow_sqrt() {
    check_unary(
        "pow^0.5",
        &[4],
        |gb, x| gb.pow(x, 0.5).unwrap(),
        |rng| rand_tensor(rng, &[4], 0.1, 3.0),
    );
}

#[test]
fn grad_pow_reciprocal() {
    check_unary(
        "pow^-1",
        &[4],
        |gb, x| gb.pow(x, -1.0).unwrap(),
        |rng| rand_tensor(rng, &[4], 0.2, 2.0),
    );
}

#[test]
fn grad_abs_off_kink() {
    check_unary(
        "abs",
        &[2, 3],
        |gb, x| gb.abs(x),
        |rng| rand_tensor_off_kink(rng, &[2, 3], 1e-2),
    );
}

#[test]
fn grad_exp() {
    check_unary(
        "exp",
        &[2, 3],
        |gb, x| gb.exp(x),
        |rng| rand_tensor(rng, &[2, 3], -2.0, 2.0),
    );
}

#[test]
fn grad_log_guarded() {
    check_unary(
        "log",
        &[5],
        |gb, x| gb.log(x),
        |rng| rand_tensor(rng, &[5], 0.1, 3.0),
    );
}

#[test]
fn grad_relu_off_kink() {
    check_unary(
        "relu",
        &[3, 3],
        |gb, x| gb.relu(x),
        |rng| rand_tensor_off_kink(rng, &[3, 3], 1e-2),
    );
}

#[test]
fn grad_sigmoid() {
    check_unary(
        "sigmoid",
        &[2, 4],
        |gb, x| gb.sigmoid(x),
        |rng| rand_tensor(rng, &[2, 4], -3.0, 3.0),
    );
}

#[test]
fn grad_swish() {
    check_unary(
        "swish",
        &[2, 4],
        |gb, x| gb.swish(x),
        |rng| rand_tensor(rng, &[2, 4], -3.0, 3.0),
    );
}

#[test]
fn grad_softmax_temperature() {
    for t in [1.0, 9.0] {
        check_unary(
            &format!("softmax_t={t}"),
            &[2, 5],
            move |gb, x| gb.softmax_t(x, t).unwrap(),
            |rng| rand_tensor(rng, &[2, 5], -3.0, 3.0),
        );
    }
}

#[test]
fn grad_reductions() {
    check_unary(
        "sum",
        &[2, 3],
        |gb, x| gb.sum(x),
        |rng| rand_tensor(rng, &[2, 3], -2.0, 2.0),
    );
    check_unary(
        "mean",
        &[2, 3],
        |gb, x| gb.mean(x),
        |rng| rand_tensor(rng, &[2, 3], -2.0, 2.0),
    );
    check_unary(
        "l2_norm",
        &[6],
        |gb, x| gb.l2_norm(x),
        |rng| rand_tensor_off_kink(rng, &[6], 0.25),
    );
}

#[test]
fn grad_reshape() {
    check_unary(
        "reshape",
        &[2, 6],
        |gb, x| gb.reshape(x, vec![3, 4]).unwrap(),
        |rng| rand_tensor(rng, &[2, 6], -2.0, 2.0),
    );
}

#[test]
fn grad_channel_reductions() {
    check_unary(
        "global_avg_pool",
        &[3, 4, 4],
        |gb, x| gb.global_avg_pool(x).unwrap(),
        |rng| rand_tensor(rng, &[3, 4, 4], -2.0, 2.0),
    );
    check_unary(
        "channel_mean",
        &[3, 4, 4],
        |gb, x| gb.channel_mean(x).unwrap(),
        |rng| rand_tensor(rng, &[3, 4, 4], -2.0, 2.0),
    );
    check_unary(
        "avg_pool",
        &[2, 6, 6],
        |gb, x| gb.avg_pool(x, 2, 2).unwrap(),
        |rng| rand_tensor(rng, &[2, 6, 6], -2.0, 2.0),
    );
}

#[test]
fn grad_dense_vector_and_matrix() {
    for (label, xshape) in [("dense_vec", vec![4]), ("dense_mat", vec![4, 3])] {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut gb = GraphBuilder::new();
        let w = gb.param("w", vec![3, 4]).unwrap();
        let x = gb.param("x", xshape.clone()).unwrap();
        let y = gb.dense(w, x).unwrap();
        let loss = weighted_loss(&mut gb, y, &mut rng);
        let graph = gb.build_with_loss(loss).unwrap();
        for _ in 0..POINTS {
            let bw = rand_tensor(&mut rng, &[3, 4], -1.5, 1.5);
            let bx = rand_tensor(&mut rng, &xshape, -1.5, 1.5);
            check_all(
                label,
                &graph,
                &bindings(vec![("w", bw), ("x", bx)]),
                &["w", "x"],
            );
        }
    }
}

#[test]
fn grad_conv2d_strides_and_padding() {
    // (stride, padding, with_bias)
    for (stride, padding, with_bias) in [(1, 0, true), (1, 1, false), (2, 1, true)] {
        let label = format!("conv_s{stride}_p{padding}_b{with_bias}");
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + stride as u64 * 10 + padding as u64);
        let mut gb = GraphBuilder::new();
        let x = gb.param("x", vec![2, 5, 5]).unwrap();
        let w = gb.param("w", vec![3, 2, 3, 3]).unwrap();
        let b = if with_bias {
            Some(gb.param("b", vec![3]).unwrap())
        } else {
            None
        };
        let y = gb.conv2d(x, w, b, stride, padding).unwrap();
        let loss = weighted_loss(&mut gb, y, &mut rng);
        let graph = gb.build_with_loss(loss).unwrap();
        let mut leaves = vec!["x", "w"];
        if with_bias {
            leaves.push("b");
        }
        // conv fd is the most expensive check; 25 points keeps it quick
        // while still spanning many weight/input sign patterns.
        for _ in 0..25 {
            let mut binds = bindings(vec![
                ("x", rand_tensor(&mut rng, &[2, 5, 5], -1.5, 1.5)),
                ("w", rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)),
            ]);
            if with_bias {
                binds.insert("b".into(), rand_tensor(&mut rng, &[3], -1.0, 1.0));
            }
            check_all(&label, &graph, &binds, &leaves);
        }
    }
}

#[test]
fn grad_concat_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    let mut gb = GraphBuilder::new();
    let a = gb.param("a", vec![2, 3, 3]).unwrap();
    let b = gb.param("b", vec![1, 3, 3]).unwrap();
    let y = gb.concat_channels(&[a, b]).unwrap();
    let loss = weighted_loss(&mut gb, y, &mut rng);
    let graph = gb.build_with_loss(loss).unwrap();
    for _ in 0..POINTS {
        let ba = rand_tensor(&mut rng, &[2, 3, 3], -2.0, 2.0);
        let bb = rand_tensor(&mut rng, &[1, 3, 3], -2.0, 2.0);
        check_all(
            "concat",
            &graph,
            &bindings(vec![("a", ba), ("b", bb)]),
            &["a", "b"],
        );
    }
}

#[test]
fn grad_scalar_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(556);
    let mut gb = GraphBuilder::new();
    let x = gb.param("x", vec![2, 3]).unwrap();
    let s = gb.param("s", vec![]).unwrap();
    let y = gb.scalar_scale(x, s).unwrap();
    let loss = weighted_loss(&mut gb, y, &mut rng);
    let graph = gb.build_with_loss(loss).unwrap();
    for _ in 0..POINTS {
        let bx = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let bs = Tensor::scalar(rng.gen_range(-2.0..2.0)).unwrap();
        check_all(
            "scalar_scale",
            &graph,
            &bindings(vec![("x", bx), ("s", bs)]),
            &["x", "s"],
        );
    }
}

/// A conv -> swish -> pool -> dense -> softmax -> log chain: the same kind
/// of composition the detection losses use, checked end to end.
#[test]
fn grad_composite_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut gb = GraphBuilder::new();
    let x = gb.input("x", vec![1, 6, 6]).unwrap();
    let w1 = gb.param("w1", vec![2, 1, 3, 3]).unwrap();
    let b1 = gb.param("b1", vec![2]).unwrap();
    let c = gb.conv2d(x, w1, Some(b1), 2, 1).unwrap();
    let a = gb.swish(c);
    let p = gb.global_avg_pool(a).unwrap();
    let w2 = gb.param("w2", vec![3, 2]).unwrap();
    let logits = gb.dense(w2, p).unwrap();
    let probs = gb.softmax_t(logits, 2.0).unwrap();
    let logp = gb.log(probs);
    let onehot = gb.constant(Tensor::from_vec(vec![0.0, 1.0, 0.0]).unwrap());
    let picked = gb.mul(logp, onehot).unwrap();
    let s = gb.sum(picked);
    let loss = gb.scale_const(s, -1.0).unwrap();
    let graph = gb.build_with_loss(loss).unwrap();

    for _ in 0..25 {
        let binds = bindings(vec![
            ("x", rand_tensor(&mut rng, &[1, 6, 6], -1.0, 1.0)),
            ("w1", rand_tensor(&mut rng, &[2, 1, 3, 3], -0.8, 0.8)),
            ("b1", rand_tensor(&mut rng, &[2], -0.5, 0.5)),
            ("w2", rand_tensor(&mut rng, &[3, 2], -0.8, 0.8)),
        ]);
        check_all(
            "composite",
            &graph,
            &binds,
            &["x", "w1", "b1", "w2"],
        );
    }
}
