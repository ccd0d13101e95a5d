//! Finite-difference gradients, used as the independent oracle for the
//! reverse-mode sweep.
//!
//! `fd_gradient` takes any scalar-valued function of a tensor and
//! central-differences it one coordinate at a time. When the one-sided
//! slopes disagree badly (a kink, like `relu` at 0 or an L2 norm at the
//! origin), the coordinate is declared non-differentiable instead of
//! silently averaging the two slopes.

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `point`.
///
/// For each coordinate the forward and backward slopes are compared; if they
/// disagree by more than 25 % of their shared magnitude (plus a small
/// absolute floor) the point is reported as non-differentiable in that
/// coordinate rather than returning a misleading average.
pub fn fd_gradient(
    f: &dyn Fn(&Tensor) -> Result<f64>,
    point: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("fd epsilon must be > 0"));
    }
    let f0 = f(point)?;
    let mut grad = vec![0.0; point.numel()];
    let mut probe = point.clone();
    #[allow(clippy::needless_range_loop)] // i indexes probe and grad together
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;

        let slope_fwd = (fp - f0) / epsilon;
        let slope_bwd = (f0 - fm) / epsilon;
        let scale = slope_fwd.abs().max(slope_bwd.abs());
        if (slope_fwd - slope_bwd).abs() > 0.25 * scale + 1e-3 {
            return Err(Error::NonDifferentiable {
                coord: i,
                left: slope_bwd,
                right: slope_fwd,
            });
        }
        grad[i] = (fp - fm) / (2.0 * epsilon);
    }
    Ok(Tensor::from_parts(point.shape().to_vec(), grad))
}

/// Finite-difference the designated loss of `graph` with respect to the leaf
/// named `leaf`, holding every other binding fixed.
pub fn fd_gradient_of_leaf(
    graph: &Graph,
    bindings: &Bindings,
    leaf: &str,
    epsilon: f64,
) -> Result<Tensor> {
    let point = bindings
        .get(leaf)
        .ok_or_else(|| Error::MissingBinding(leaf.to_string()))?
        .clone();
    let eval = |t: &Tensor| -> Result<f64> {
        let mut b = bindings.clone();
        b.insert(leaf.to_string(), t.clone());
        graph.forward(&b)?.loss()
    };
    fd_gradient(&eval, &point, epsilon)
}

/// Mixed absolute/relative agreement used throughout the gradient checks:
/// `|a - b| <= rtol * max(|a|, |b|) + atol`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

/// Assert elementwise `close` over two tensors, with a labelled panic on the
/// first disagreement. Intended for tests.
pub fn assert_tensors_close(label: &str, a: &Tensor, b: &Tensor, rtol: f64, atol: f64) {
    assert_eq!(a.shape(), b.shape(), "{label}: shape mismatch");
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!(
            close(x, y, rtol, atol),
            "{label}: element {i} disagrees: {x} vs {y}"
        );
    }
}
