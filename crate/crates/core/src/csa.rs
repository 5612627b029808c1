//! Collision-sensitive attention.
//!
//! Each spatial position is scored by its L1 distance from a learnable
//! prototype of common local patterns. The softmax of these rarity scores
//! weights the positions, so rare local cues dominate the pooled feature.

use crate::error::{Error, Result};
use crate::matrix::{sign0, Matrix};

/// Local features of one sample: `P` positions, each a `C`-dim vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    features: Matrix,
}

impl LocalFeatureMap {
    /// `data` is position-major: `data[p * channels + c]`.
    pub fn new(channels: usize, positions: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || positions == 0 {
            return Err(Error::domain("feature map needs C >= 1 and P >= 1"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("feature map has non-finite entries"));
        }
        Ok(Self {
            features: Matrix::from_vec(positions, channels, data)?,
        })
    }

    pub fn from_positions(positions: &[Vec<f64>]) -> Result<Self> {
        let channels = positions.first().map_or(0, Vec::len);
        Self::new(channels, positions.len(), Matrix::from_rows(positions)?.as_slice().to_vec())
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn position(&self, p: usize) -> &[f64] {
        self.features.row(p)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.features
    }

    pub fn as_slice(&self) -> &[f64] {
        self.features.as_slice()
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        self.features.as_mut_slice()
    }

    /// Plain average over positions.
    pub fn global_mean(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.channels()];
        for row in self.features.iter_rows() {
            for (a, x) in g.iter_mut().zip(row) {
                *a += x;
            }
        }
        let inv = 1.0 / self.positions() as f64;
        g.iter_mut().for_each(|x| *x *= inv);
        g
    }
}

/// Learnable prototype of frequent local patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype(pub Vec<f64>);

impl Prototype {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_channels(t: &LocalFeatureMap, w: &Prototype) -> Result<()> {
    if t.channels() != w.len() {
        return Err(Error::domain(format!(
            "prototype has {} channels, feature map has {}",
            w.len(),
            t.channels()
        )));
    }
    Ok(())
}

/// `r_p = |T_p - w|_1` for each position.
pub fn rarity(t: &LocalFeatureMap, w: &Prototype) -> Result<Vec<f64>> {
    check_channels(t, w)?;
    Ok(t
        .features
        .iter_rows()
        .map(|row| row.iter().zip(&w.0).map(|(x, y)| (x - y).abs()).sum())
        .collect())
}

/// Max-shifted softmax over rarity scores.
pub fn attention_map(r: &[f64]) -> Vec<f64> {
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut alpha: Vec<f64> = r.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= total);
    alpha
}

/// `a = sum_p alpha_p T_p`.
pub fn attended_pool(t: &LocalFeatureMap, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != t.positions() {
        return Err(Error::domain(format!(
            "{} attention weights for {} positions",
            alpha.len(),
            t.positions()
        )));
    }
    let mut a = vec![0.0; t.channels()];
    for (row, &w) in t.features.iter_rows().zip(alpha) {
        for (acc, x) in a.iter_mut().zip(row) {
            *acc += w * x;
        }
    }
    Ok(a)
}

/// Concatenate the global and attended features.
pub fn fuse(global: &[f64], attended: &[f64]) -> Result<Vec<f64>> {
    if global.len() != attended.len() {
        return Err(Error::domain("global and attended features differ in length"));
    }
    let mut z = Vec::with_capacity(2 * global.len());
    z.extend_from_slice(global);
    z.extend_from_slice(attended);
    Ok(z)
}

/// Gradients of the attended feature with respect to `T` and the prototype.
#[derive(Debug, Clone)]
pub struct AttentionGrad {
    pub grad_t: Matrix,
    pub grad_w: Vec<f64>,
}

/// Reverse pass through `rarity -> attention_map -> attended_pool`.
///
/// `upstream` is `dL/da`.
pub fn attention_backward(
    t: &LocalFeatureMap,
    w: &Prototype,
    alpha: &[f64],
    upstream: &[f64],
) -> Result<AttentionGrad> {
    check_channels(t, w)?;
    if upstream.len() != t.channels() || alpha.len() != t.positions() {
        return Err(Error::domain("shape mismatch in attention backward"));
    }
    let mut grad_t = Matrix::zeros(t.positions(), t.channels());
    let mut grad_w = vec![0.0; w.len()];
    attention_backward_into(t, w, alpha, upstream, Some(&mut grad_t), &mut grad_w);
    Ok(AttentionGrad { grad_t, grad_w })
}

/// Accumulating form; skips the `T` gradient when `grad_t` is `None`.
pub(crate) fn attention_backward_into(
    t: &LocalFeatureMap,
    w: &Prototype,
    alpha: &[f64],
    upstream: &[f64],
    mut grad_t: Option<&mut Matrix>,
    grad_w: &mut [f64],
) {
    // dL/dalpha_p = upstream . T_p, then through the softmax.
    let g: Vec<f64> = t
        .features
        .iter_rows()
        .map(|row| row.iter().zip(upstream).map(|(x, u)| x * u).sum())
        .collect();
    let mean_g: f64 = alpha.iter().zip(&g).map(|(a, g)| a * g).sum();
    for (p, row) in t.features.iter_rows().enumerate() {
        let dr = alpha[p] * (g[p] - mean_g);
        if let Some(gt) = grad_t.as_deref_mut() {
            let out = gt.row_mut(p);
            for c in 0..row.len() {
                out[c] += alpha[p] * upstream[c] + dr * sign0(row[c] - w.0[c]);
            }
        }
        for c in 0..row.len() {
            grad_w[c] -= dr * sign0(row[c] - w.0[c]);
        }
    }
}
