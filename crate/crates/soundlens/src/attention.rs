//! Attention maps derived from backbone activations, and their multi-teacher
//! product — the quantities the alignment loss compares.
//!
//! An activation tensor `A` of shape `C x H x W` collapses to a spatial map
//! `Q[h,w] = ((1/C) sum_c |A[c,h,w]|)^r`. Taking the absolute value before
//! averaging keeps maps nonnegative even for signed activations, so the
//! elementwise product across teachers reads as an unnormalized joint
//! confidence. The classic alternative (raise to `r` before averaging) is
//! available behind [`AttentionMode::PowerThenMean`] but is not the default.
//!
//! Everything exists twice: as plain tensor functions for inspection and
//! metrics, and as graph fragments ([`attention_map_node`],
//! [`l2_normalize_node`]) for differentiable use inside loss graphs.

use std::io::Write as _;
use std::path::Path;

use crate::boxes::PyramidLevel;
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, NodeId, LOG_GUARD};
use crate::tensor::Tensor;

/// Order of the channel average and the exponent `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// `(mean_c |A|)^r` — the default.
    #[default]
    MeanThenPower,
    /// `mean_c |A|^r` — classic attention-transfer style.
    PowerThenMean,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::MeanThenPower => "mean-then-power",
            AttentionMode::PowerThenMean => "power-then-mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mean-then-power" => AttentionMode::MeanThenPower,
            "power-then-mean" => AttentionMode::PowerThenMean,
            other => return Err(Error::invalid(format!("unknown attention mode {other:?}"))),
        })
    }
}

/// Backbone activations at one pyramid level, shape `C x H x W`.
#[derive(Debug, Clone)]
pub struct ActivationTensor {
    pub level: PyramidLevel,
    pub values: Tensor,
}

impl ActivationTensor {
    pub fn new(level: PyramidLevel, values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "activation tensor".into(),
                expected: vec![0, 0, 0],
                actual: values.shape().to_vec(),
            });
        }
        Ok(Self { level, values })
    }
}

/// Nonnegative spatial attention map, shape `H x W`.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub level: PyramidLevel,
    pub values: Tensor,
}

/// Collapse activations to a spatial attention map with exponent `r > 0`.
pub fn attention_map(a: &ActivationTensor, r: f64) -> Result<AttentionMap> {
    attention_map_with_mode(a, r, AttentionMode::MeanThenPower)
}

pub fn attention_map_with_mode(
    a: &ActivationTensor,
    r: f64,
    mode: AttentionMode,
) -> Result<AttentionMap> {
    if !(r > 0.0) {
        return Err(Error::invalid(format!("attention exponent r={r} must be > 0")));
    }
    let shape = a.values.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; h * w];
    match mode {
        AttentionMode::MeanThenPower => {
            for ci in 0..c {
                let plane = &a.values.data()[ci * h * w..(ci + 1) * h * w];
                for (o, &v) in out.iter_mut().zip(plane) {
                    *o += v.abs();
                }
            }
            let inv = 1.0 / c as f64;
            for o in &mut out {
                *o = (*o * inv).powf(r);
            }
        }
        AttentionMode::PowerThenMean => {
            for ci in 0..c {
                let plane = &a.values.data()[ci * h * w..(ci + 1) * h * w];
                for (o, &v) in out.iter_mut().zip(plane) {
                    *o += v.abs().powf(r);
                }
            }
            let inv = 1.0 / c as f64;
            for o in &mut out {
                *o *= inv;
            }
        }
    }
    Ok(AttentionMap {
        level: a.level,
        values: Tensor::new(vec![h, w], out)?,
    })
}

/// Elementwise product of same-level attention maps across teachers.
pub fn teacher_product(maps: &[AttentionMap]) -> Result<AttentionMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("teacher_product needs at least one map"))?;
    let mut out = first.values.data().to_vec();
    for m in &maps[1..] {
        if m.level != first.level || m.values.shape() != first.values.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("teacher_product level {}", first.level),
                expected: first.values.shape().to_vec(),
                actual: m.values.shape().to_vec(),
            });
        }
        for (o, &v) in out.iter_mut().zip(m.values.data()) {
            *o *= v;
        }
    }
    Ok(AttentionMap {
        level: first.level,
        values: Tensor::new(first.values.shape().to_vec(), out)?,
    })
}

/// Divide by `max(l2_norm, 1e-12)`; the zero map passes through unchanged.
pub fn l2_normalize(q: &AttentionMap) -> AttentionMap {
    let norm = q.values.l2_norm().max(LOG_GUARD);
    AttentionMap {
        level: q.level,
        values: q.values.map(|v| v / norm),
    }
}

// ---------------------------------------------------------------------------
// graph fragments
// ---------------------------------------------------------------------------

/// In-graph attention map: `activations [C,H,W] -> map [H,W]`.
pub fn attention_map_node(
    gb: &mut GraphBuilder,
    activations: NodeId,
    r: f64,
    mode: AttentionMode,
) -> Result<NodeId> {
    if !(r > 0.0) {
        return Err(Error::invalid(format!("attention exponent r={r} must be > 0")));
    }
    let magnitude = gb.abs(activations);
    match mode {
        AttentionMode::MeanThenPower => {
            let mean = gb.channel_mean(magnitude)?;
            gb.pow(mean, r)
        }
        AttentionMode::PowerThenMean => {
            let powered = gb.pow(magnitude, r)?;
            gb.channel_mean(powered)
        }
    }
}

/// In-graph L2 normalization via the guarded reciprocal: values scaled by
/// `1 / max(norm, 1e-12)`, exactly the numeric guard.
pub fn l2_normalize_node(gb: &mut GraphBuilder, q: NodeId) -> Result<NodeId> {
    let norm = gb.l2_norm(q);
    let inv = gb.pow(norm, -1.0)?;
    gb.scalar_scale(q, inv)
}

// ---------------------------------------------------------------------------
// heatmap dumps
// ---------------------------------------------------------------------------

/// Write a map as binary 8-bit PGM, scaled so the peak maps to 255. A zero
/// map produces an all-black image.
pub fn write_pgm(path: &Path, map: &AttentionMap) -> Result<()> {
    let (h, w) = (map.values.shape()[0], map.values.shape()[1]);
    let peak = map
        .values
        .data()
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(LOG_GUARD);
    let mut bytes = Vec::with_capacity(h * w + 32);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in map.values.data() {
        bytes.push(((v / peak) * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{assert_tensors_close, fd_gradient_of_leaf};
    use crate::graph::Bindings;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn act(level: PyramidLevel, shape: Vec<usize>, data: Vec<f64>) -> ActivationTensor {
        ActivationTensor::new(level, Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn zero_activations_give_zero_map() {
        let a = ActivationTensor::new(PyramidLevel::P3, Tensor::zeros(vec![4, 2, 2])).unwrap();
        let q = attention_map(&a, 2.0).unwrap();
        assert!(q.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_two_with_r_two_gives_four() {
        let a = act(PyramidLevel::P4, vec![1, 2, 2], vec![2.0; 4]);
        let q = attention_map(&a, 2.0).unwrap();
        assert!(q.values.data().iter().all(|&v| (v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn r_one_is_plain_channel_mean() {
        let a = act(PyramidLevel::P5, vec![2, 1, 1], vec![1.0, 3.0]);
        let q = attention_map(&a, 1.0).unwrap();
        assert_eq!(q.values.data(), &[2.0]);
    }

    #[test]
    fn nonpositive_r_is_rejected() {
        let a = act(PyramidLevel::P3, vec![1, 1, 1], vec![1.0]);
        assert!(attention_map(&a, 0.0).is_err());
        assert!(attention_map(&a, -1.0).is_err());
    }

    #[test]
    fn maps_are_nonnegative_for_signed_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let data: Vec<f64> = (0..3 * 4 * 4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let a = act(PyramidLevel::P3, vec![3, 4, 4], data);
            for r in [0.5, 1.0, 2.0, 4.0] {
                let q = attention_map(&a, r).unwrap();
                assert!(q.values.data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn product_of_single_map_is_identity() {
        let a = act(PyramidLevel::P3, vec![1, 1, 2], vec![0.3, 0.9]);
        let q = attention_map(&a, 1.0).unwrap();
        let p = teacher_product(std::slice::from_ref(&q)).unwrap();
        assert_eq!(p.values.data(), q.values.data());
    }

    #[test]
    fn zero_teacher_annihilates_product() {
        let z = AttentionMap {
            level: PyramidLevel::P4,
            values: Tensor::zeros(vec![2, 2]),
        };
        let q = AttentionMap {
            level: PyramidLevel::P4,
            values: Tensor::full(vec![2, 2], 0.7).unwrap(),
        };
        let p = teacher_product(&[q, z]).unwrap();
        assert!(p.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_multiplies_cell_values() {
        let a = AttentionMap {
            level: PyramidLevel::P5,
            values: Tensor::full(vec![1, 1], 0.5).unwrap(),
        };
        let b = AttentionMap {
            level: PyramidLevel::P5,
            values: Tensor::full(vec![1, 1], 0.8).unwrap(),
        };
        let p = teacher_product(&[a, b]).unwrap();
        assert!((p.values.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn product_rejects_level_mismatch() {
        let a = AttentionMap {
            level: PyramidLevel::P3,
            values: Tensor::full(vec![1, 1], 0.5).unwrap(),
        };
        let b = AttentionMap {
            level: PyramidLevel::P4,
            values: Tensor::full(vec![1, 1], 0.8).unwrap(),
        };
        assert!(teacher_product(&[a, b]).is_err());
    }

    #[test]
    fn normalize_three_four_map() {
        let q = AttentionMap {
            level: PyramidLevel::P3,
            values: Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap(),
        };
        let n = l2_normalize(&q);
        assert_tensors_close(
            "3-4",
            &n.values,
            &Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap(),
            1e-15,
            0.0,
        );
    }

    #[test]
    fn normalize_is_idempotent_and_guards_zero() {
        let q = AttentionMap {
            level: PyramidLevel::P3,
            values: Tensor::new(vec![2], vec![0.6, 0.8]).unwrap(),
        };
        let n = l2_normalize(&q);
        assert_tensors_close("idempotent", &n.values, &q.values, 1e-15, 1e-15);

        let z = AttentionMap {
            level: PyramidLevel::P3,
            values: Tensor::zeros(vec![3, 3]),
        };
        let nz = l2_normalize(&z);
        assert!(nz.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_teacher_scaling_cancels_after_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data_a: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let data_b: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r = 2.0;
        let qa = attention_map(&act(PyramidLevel::P3, vec![2, 3, 3], data_a.clone()), r).unwrap();
        let qb = attention_map(&act(PyramidLevel::P3, vec![2, 3, 3], data_b.clone()), r).unwrap();
        let base = l2_normalize(&teacher_product(&[qa.clone(), qb]).unwrap());

        let lambda = 7.5;
        let scaled_b: Vec<f64> = data_b.iter().map(|v| v * lambda).collect();
        let qb2 = attention_map(&act(PyramidLevel::P3, vec![2, 3, 3], scaled_b), r).unwrap();
        // the scaled teacher's own map grows by lambda^r ...
        let qb_ref = attention_map(&act(PyramidLevel::P3, vec![2, 3, 3], data_b), r).unwrap();
        for (s, u) in qb2.values.data().iter().zip(qb_ref.values.data()) {
            assert!((s - u * lambda.powf(r)).abs() <= 1e-9 * s.abs().max(1.0));
        }
        // ... but the normalized product is unchanged
        let scaled = l2_normalize(&teacher_product(&[qa, qb2]).unwrap());
        assert_tensors_close("scale-invariance", &scaled.values, &base.values, 1e-9, 1e-12);
    }

    #[test]
    fn graph_fragment_matches_numeric_path_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let shape = vec![2, 3, 3];
        // keep activations away from the |.| kink at zero
        let data: Vec<f64> = (0..18)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();

        let mut gb = GraphBuilder::new();
        let x = gb.param("x", shape.clone()).unwrap();
        let q = attention_map_node(&mut gb, x, 2.0, AttentionMode::MeanThenPower).unwrap();
        let n = l2_normalize_node(&mut gb, q).unwrap();
        gb.mark_output("normalized", n);
        let weights = gb.constant(Tensor::new(vec![3, 3], (1..=9).map(|v| v as f64 * 0.1).collect()).unwrap());
        let weighted = gb.mul(n, weights).unwrap();
        let loss = gb.sum(weighted);
        let graph = gb.build_with_loss(loss).unwrap();

        let point = Tensor::new(shape.clone(), data.clone()).unwrap();
        let mut bindings = Bindings::new();
        bindings.insert("x".into(), point);

        let exec = graph.forward(&bindings).unwrap();
        // numeric path agrees with the graph fragment
        let numeric = l2_normalize(&attention_map(
            &act(PyramidLevel::P3, shape, data),
            2.0,
        )
        .unwrap());
        assert_tensors_close(
            "graph vs numeric",
            exec.output("normalized").unwrap(),
            &numeric.values,
            1e-12,
            1e-15,
        );
        // and the fragment differentiates correctly
        let grads = exec.backward().unwrap();
        let fd = fd_gradient_of_leaf(&graph, &bindings, "x", 1e-5).unwrap();
        assert_tensors_close("attention grad", grads.get("x").unwrap(), &fd, 1e-4, 1e-8);
    }

    #[test]
    fn pgm_dump_is_parseable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let map = AttentionMap {
            level: PyramidLevel::P3,
            values: Tensor::new(vec![2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap(),
        };
        write_pgm(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        assert_eq!(*bytes.last().unwrap(), 255);
    }
}
