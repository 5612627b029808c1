//! Continuous pre-hash geometry.
//!
//! An encoder output `v` is mapped to `tanh(s1 * v / |v|)`, a point strictly
//! inside the cube `(-1, 1)^l`. The L1 distance between two such points,
//! divided by `l`, is the real-valued normalized Hamming distance; it
//! approaches the code-level distance as `s1` grows.

use crate::error::{Error, Result};
use crate::hamming::BitCode;
use crate::matrix::{l2_norm, sign0};

/// Norms at or below this are rejected by [`tanh_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Output of [`tanh_normalize`]: every component lies in `(-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturatedVector(Vec<f64>);

impl SaturatedVector {
    /// Wrap values already known to lie strictly inside `(-1, 1)`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(x) = values.iter().find(|x| !(x.abs() < 1.0)) {
            return Err(Error::domain(format!("{x} is not inside (-1, 1)")));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn checked_norm(v: &[f64]) -> Result<f64> {
    let norm = l2_norm(v);
    if !(norm > EPS_NORM) {
        return Err(Error::DegenerateNorm { norm, index: None });
    }
    Ok(norm)
}

/// `tanh(s1 * v / |v|_2)` componentwise.
pub fn tanh_normalize(v: &[f64], s1: f64) -> Result<SaturatedVector> {
    let mut out = vec![0.0; v.len()];
    tanh_normalize_into(v, s1, &mut out)?;
    Ok(SaturatedVector(out))
}

/// Allocation-free form of [`tanh_normalize`].
pub(crate) fn tanh_normalize_into(v: &[f64], s1: f64, out: &mut [f64]) -> Result<()> {
    if !(s1 > 0.0) {
        return Err(Error::domain(format!("s1 must be positive, got {s1}")));
    }
    let k = s1 / checked_norm(v)?;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (k * x).tanh();
    }
    Ok(())
}

/// Vector-Jacobian product of [`tanh_normalize`] at `v`.
///
/// With `u = v/|v|` and `y = tanh(s1 u)`, this is
/// `(h - u (u . h)) / |v|` where `h = s1 (1 - y^2) * upstream`.
pub fn grad_tanh_normalize(v: &[f64], s1: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; v.len()];
    grad_tanh_normalize_into(v, s1, upstream, &mut out)?;
    Ok(out)
}

pub(crate) fn grad_tanh_normalize_into(
    v: &[f64],
    s1: f64,
    upstream: &[f64],
    out: &mut [f64],
) -> Result<()> {
    if v.len() != upstream.len() || v.len() != out.len() {
        return Err(Error::domain("length mismatch in tanh-normalize backward"));
    }
    let norm = checked_norm(v)?;
    let inv = 1.0 / norm;
    let mut uh = 0.0;
    for ((o, &x), &g) in out.iter_mut().zip(v).zip(upstream) {
        let y = (s1 * x * inv).tanh();
        let h = s1 * (1.0 - y * y) * g;
        *o = h;
        uh += x * inv * h;
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (*o - x * inv * uh) * inv;
    }
    Ok(())
}

/// Real-valued normalized Hamming distance `|a - b|_1 / l`.
pub fn nhd_real(a: &SaturatedVector, b: &SaturatedVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(nhd_slices(a.as_slice(), b.as_slice()))
}

#[inline]
pub(crate) fn nhd_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Gradient of `nhd_slices(a, b)` with respect to `a` (negate for `b`).
#[inline]
pub(crate) fn nhd_grad_into(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let k = scale / a.len() as f64;
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += k * sign0(x - y);
    }
}

/// Sign quantization: bit `k` is set iff `v[k] >= 0`.
pub fn sign_quantize(v: &[f64]) -> Result<BitCode> {
    let bits: Vec<bool> = v.iter().map(|&x| x >= 0.0).collect();
    BitCode::from_bools(&bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamming::nhd_codes;
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn central_jacobian_t(v: &[f64], s1: f64, upstream: &[f64], h: f64) -> Vec<f64> {
        let f = |x: &[f64]| -> f64 {
            let y = tanh_normalize(x, s1).unwrap();
            y.as_slice().iter().zip(upstream).map(|(a, b)| a * b).sum()
        };
        let mut x = v.to_vec();
        (0..v.len())
            .map(|k| {
                x[k] = v[k] + h;
                let fp = f(&x);
                x[k] = v[k] - h;
                let fm = f(&x);
                x[k] = v[k];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn unit_axis_example() {
        let y = tanh_normalize(&[1.0, 0.0, 0.0, 0.0], 8.0).unwrap();
        assert!((y.as_slice()[0] - 0.999_999_774_929_1).abs() < 1e-12);
        assert_eq!(&y.as_slice()[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_vector_maps_to_tanh_of_s1_over_sqrt_l() {
        let y = tanh_normalize(&[3.0; 9], 8.0).unwrap();
        let expected = (8.0f64 / 3.0).tanh();
        assert!(y.as_slice().iter().all(|&x| (x - expected).abs() < 1e-15));
    }

    #[test]
    fn zero_vector_is_an_error() {
        assert!(matches!(
            tanh_normalize(&[0.0, 0.0], 8.0),
            Err(Error::DegenerateNorm { .. })
        ));
        assert!(matches!(
            grad_tanh_normalize(&[0.0, 0.0], 8.0, &[1.0, 1.0]),
            Err(Error::DegenerateNorm { .. })
        ));
        assert!(tanh_normalize(&[1.0], 0.0).is_err());
    }

    #[test]
    fn nhd_real_examples() {
        let a = SaturatedVector::new(vec![0.9, -0.9]).unwrap();
        let b = SaturatedVector::new(vec![0.9, 0.9]).unwrap();
        assert!((nhd_real(&a, &b).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(nhd_real(&a, &a).unwrap(), 0.0);
        let d = 0.01;
        let p = SaturatedVector::new(vec![1.0 - d, -(1.0 - d), 1.0 - d]).unwrap();
        let n = SaturatedVector::new(p.as_slice().iter().map(|x| -x).collect()).unwrap();
        assert!((nhd_real(&p, &n).unwrap() - 2.0 * (1.0 - d)).abs() < 1e-15);
        assert!(nhd_real(&a, &SaturatedVector::new(vec![0.1]).unwrap()).is_err());
        assert!(SaturatedVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn sign_quantize_zero_is_positive() {
        let c = sign_quantize(&[0.3, -0.2, 0.0]).unwrap();
        assert_eq!((c.bit(0), c.bit(1), c.bit(2)), (true, false, true));
        let c = sign_quantize(&[-1.0, -2.0, -0.5]).unwrap();
        assert_eq!(c.words(), &[0]);
    }

    #[test]
    fn sign_quantize_commutes_with_normalization() {
        let mut rng = rng_for(5, 0, 0);
        for _ in 0..1000 {
            let l = rng.gen_range(1..40);
            let v: Vec<f64> = (0..l).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = tanh_normalize(&v, 8.0).unwrap();
            assert_eq!(sign_quantize(&v).unwrap(), sign_quantize(y.as_slice()).unwrap());
        }
    }

    #[test]
    fn small_s1_jacobian_is_projected_identity() {
        let v = [0.6, -0.8, 0.0];
        let s1 = 0.01;
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            let col = central_jacobian_t(&v, s1, &e, 1e-5);
            for (j, &c) in col.iter().enumerate() {
                let delta = if j == k { 1.0 } else { 0.0 };
                let expected = s1 * (delta - v[j] * v[k]);
                assert!((c - expected).abs() < 1e-6, "{c} vs {expected}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let g = grad_tanh_normalize(&[1.0, 2.0, -3.0], 8.0, &[0.0; 3]).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rng_for(9, 0, 0);
        for _ in 0..100 {
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let up: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic = grad_tanh_normalize(&v, 8.0, &up).unwrap();
            let numeric = central_jacobian_t(&v, 8.0, &up, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                assert!(rel < 1e-4, "analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn large_s1_recovers_code_distance() {
        let mut rng = rng_for(21, 0, 0);
        for _ in 0..200 {
            let v: Vec<f64> = (0..16).map(|_| rng.gen_range(0.2..1.0) * if rng.gen() { 1.0 } else { -1.0 }).collect();
            let w: Vec<f64> = (0..16).map(|_| rng.gen_range(0.2..1.0) * if rng.gen() { 1.0 } else { -1.0 }).collect();
            let real = nhd_real(&tanh_normalize(&v, 50.0).unwrap(), &tanh_normalize(&w, 50.0).unwrap()).unwrap();
            let code = nhd_codes(&sign_quantize(&v).unwrap(), &sign_quantize(&w).unwrap()).unwrap();
            assert!((real - code).abs() < 1e-3, "{real} vs {code}");
        }
    }

    proptest! {
        #[test]
        fn nhd_real_is_a_bounded_metric(
            a in proptest::collection::vec(-0.999f64..0.999, 6),
            b in proptest::collection::vec(-0.999f64..0.999, 6),
            c in proptest::collection::vec(-0.999f64..0.999, 6),
        ) {
            let (a, b, c) = (SaturatedVector::new(a).unwrap(), SaturatedVector::new(b).unwrap(), SaturatedVector::new(c).unwrap());
            let ab = nhd_real(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&ab));
            prop_assert_eq!(ab, nhd_real(&b, &a).unwrap());
            prop_assert!(ab <= nhd_real(&a, &c).unwrap() + nhd_real(&c, &b).unwrap() + 1e-12);
        }

        #[test]
        fn normalized_components_bounded_by_tanh_s1(
            v in proptest::collection::vec(-10f64..10.0, 1..20),
            s1 in 0.1f64..20.0,
        ) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let y = tanh_normalize(&v, s1).unwrap();
            for (yk, vk) in y.as_slice().iter().zip(&v) {
                prop_assert!(yk.abs() <= s1.tanh() * (1.0 + 1e-15));
                prop_assert!(*yk == 0.0 || yk.signum() == vk.signum());
            }
        }
    }
}
