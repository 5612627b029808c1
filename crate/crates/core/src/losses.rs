//! Training objectives with analytic gradients.
//!
//! The Hamming-space objective compares a sample against every row of a
//! memory: its own row is the positive and scores `s (2 - d)^2 / 4`, every
//! other row is a negative scoring `s (1 - d)^2`. Negatives are therefore
//! pushed towards distance 1, where two random codes sit, rather than as far
//! away as possible.

use crate::csa::{LocalFeatureMap, Prototype};
use crate::error::{Error, Result};
use crate::feature::{
    grad_tanh_normalize_into, nhd_grad_into, nhd_slices, tanh_normalize_into,
};
use crate::matrix::{dot, log_sum_exp, log_sum_exp_parts, sign0, Matrix};

/// Learnable per-instance memory, one row per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank(pub Matrix);

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn code_len(&self) -> usize {
        self.0.cols()
    }
}

/// Learnable cluster centers plus the pseudo label of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMemory {
    centers: Matrix,
    assignment: Vec<usize>,
}

impl ClusterMemory {
    pub fn new(centers: Matrix, assignment: Vec<usize>) -> Result<Self> {
        if centers.rows() == 0 {
            return Err(Error::domain("cluster memory needs at least one cluster"));
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a >= centers.rows()) {
            return Err(Error::domain(format!(
                "assignment {bad} out of range for {} clusters",
                centers.rows()
            )));
        }
        Ok(Self {
            centers,
            assignment,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn centers_mut(&mut self) -> &mut Matrix {
        &mut self.centers
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, sample: usize) -> Option<usize> {
        self.assignment.get(sample).copied()
    }
}

/// A loss value with its gradients.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient with respect to the encoder output `v`.
    pub grad_v: Vec<f64>,
    /// Gradient with respect to the memory that was consulted.
    pub grad_bank: Matrix,
}

/// Scalar Hamming-space loss from precomputed distances.
pub fn loss_nhd_from_distances(d_ii: f64, d_negatives: &[f64], s: f64) -> f64 {
    let (z_pos, logits) = nhd_logits(d_ii, d_negatives, s);
    let (max, tail) = log_sum_exp_parts(&logits);
    (max - z_pos) + tail
}

fn nhd_logits(d_ii: f64, d_negatives: &[f64], s: f64) -> (f64, Vec<f64>) {
    let z_pos = s * (2.0 - d_ii).powi(2) / 4.0;
    let mut logits = Vec::with_capacity(d_negatives.len() + 1);
    logits.push(z_pos);
    logits.extend(d_negatives.iter().map(|d| s * (1.0 - d).powi(2)));
    (z_pos, logits)
}

/// `dL/dd_ii = (1 - e^{z+}/Z) (s/2) (2 - d_ii)`, never negative.
pub fn loss_nhd_ddii(d_ii: f64, d_negatives: &[f64], s: f64) -> f64 {
    let (z_pos, logits) = nhd_logits(d_ii, d_negatives, s);
    let p_pos = (z_pos - log_sum_exp(&logits)).exp();
    (1.0 - p_pos) * (s / 2.0) * (2.0 - d_ii)
}

/// `dL/dd_ij = (e^{z_j}/Z) 2s (d_ij - 1)` for the `j`-th negative.
///
/// Its sign is the sign of `d_ij - 1`, so descent moves every negative
/// distance towards 1.
pub fn loss_nhd_ddij(d_ii: f64, d_negatives: &[f64], j: usize, s: f64) -> Result<f64> {
    let d = *d_negatives
        .get(j)
        .ok_or_else(|| Error::domain(format!("negative index {j} out of range")))?;
    let (_, logits) = nhd_logits(d_ii, d_negatives, s);
    let p = (logits[j + 1] - log_sum_exp(&logits)).exp();
    Ok(p * 2.0 * s * (d - 1.0))
}

/// Hamming-space softmax loss on already saturated vectors.
///
/// Accumulates `scale * dL/dvhat` into `grad_vhat` and, when given,
/// `scale * dL/drow_hat` into `grad_rows`. `dist` is scratch of length
/// `rows.rows()`.
pub(crate) fn nhd_softmax_saturated(
    vhat: &[f64],
    rows: &Matrix,
    positive: usize,
    s: f64,
    scale: f64,
    grad_vhat: &mut [f64],
    grad_rows: Option<&mut Matrix>,
    dist: &mut Vec<f64>,
) -> f64 {
    dist.clear();
    dist.extend(rows.iter_rows().map(|r| nhd_slices(vhat, r)));
    // Logits reuse the distance buffer's length; the positive sits at its own index.
    let logits: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            if j == positive {
                s * (2.0 - d).powi(2) / 4.0
            } else {
                s * (1.0 - d).powi(2)
            }
        })
        .collect();
    let (max, tail) = log_sum_exp_parts(&logits);
    let lse = max + tail;
    let value = (max - logits[positive]) + tail;
    let mut grad_rows = grad_rows;
    for (j, row) in rows.iter_rows().enumerate() {
        let p = (logits[j] - lse).exp();
        let d = dist[j];
        let dl_dd = if j == positive {
            (1.0 - p) * (s / 2.0) * (2.0 - d)
        } else {
            p * 2.0 * s * (d - 1.0)
        };
        if dl_dd == 0.0 {
            continue;
        }
        let k = scale * dl_dd;
        nhd_grad_into(vhat, row, k, grad_vhat);
        if let Some(g) = grad_rows.as_deref_mut() {
            nhd_grad_into(row, vhat, k, g.row_mut(j));
        }
    }
    value
}

pub(crate) fn saturate_rows(rows: &Matrix, s1: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(rows.rows(), rows.cols());
    for j in 0..rows.rows() {
        tanh_normalize_into(rows.row(j), s1, out.row_mut(j))
            .map_err(|e| e.at_sample(j))?;
    }
    Ok(out)
}

/// Turn gradients with respect to saturated rows into raw-row gradients.
pub(crate) fn backprop_rows(rows: &Matrix, s1: f64, grad_hat: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(rows.rows(), rows.cols());
    for j in 0..rows.rows() {
        let g = grad_hat.row(j);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        grad_tanh_normalize_into(rows.row(j), s1, g, out.row_mut(j))?;
    }
    Ok(out)
}

fn softmax_memory_loss(v: &[f64], rows: &Matrix, positive: usize, s: f64, s1: f64) -> Result<LossOutput> {
    if v.len() != rows.cols() {
        return Err(Error::domain(format!(
            "feature length {} does not match memory width {}",
            v.len(),
            rows.cols()
        )));
    }
    let mut vhat = vec![0.0; v.len()];
    tanh_normalize_into(v, s1, &mut vhat)?;
    let rows_hat = saturate_rows(rows, s1)?;
    let mut grad_vhat = vec![0.0; v.len()];
    let mut grad_rows_hat = Matrix::zeros(rows.rows(), rows.cols());
    let mut scratch = Vec::new();
    let value = nhd_softmax_saturated(
        &vhat,
        &rows_hat,
        positive,
        s,
        1.0,
        &mut grad_vhat,
        Some(&mut grad_rows_hat),
        &mut scratch,
    );
    let mut grad_v = vec![0.0; v.len()];
    grad_tanh_normalize_into(v, s1, &grad_vhat, &mut grad_v)?;
    Ok(LossOutput {
        value,
        grad_v,
        grad_bank: backprop_rows(rows, s1, &grad_rows_hat)?,
    })
}

/// Instance-discrimination loss in Hamming space against the memory bank.
pub fn loss_nhd(v: &[f64], i: usize, bank: &MemoryBank, s: f64, s1: f64) -> Result<LossOutput> {
    if i >= bank.len() {
        return Err(Error::domain(format!(
            "sample index {i} out of range for a bank of {}",
            bank.len()
        )));
    }
    softmax_memory_loss(v, &bank.0, i, s, s1)
}

/// The same objective against cluster centers, positive at the assigned cluster.
pub fn loss_pseudo(v: &[f64], cluster: usize, memory: &ClusterMemory, s: f64, s1: f64) -> Result<LossOutput> {
    if cluster >= memory.n_clusters() {
        return Err(Error::domain(format!(
            "cluster {cluster} out of range for {} clusters",
            memory.n_clusters()
        )));
    }
    softmax_memory_loss(v, &memory.centers, cluster, s, s1)
}

/// Dot-product single-view objective on un-normalized `tanh` features.
pub fn loss_l2_singleview(v: &[f64], i: usize, bank: &MemoryBank, s: f64) -> Result<LossOutput> {
    let rows = &bank.0;
    if i >= rows.rows() {
        return Err(Error::domain(format!(
            "sample index {i} out of range for a bank of {}",
            rows.rows()
        )));
    }
    if v.len() != rows.cols() {
        return Err(Error::domain("feature length does not match bank width"));
    }
    let mut grad_tv = vec![0.0; v.len()];
    let mut grad_bank = Matrix::zeros(rows.rows(), rows.cols());
    let mut scratch = Vec::new();
    let t = tanh_rows(rows);
    let value = l2_singleview_accumulate(v, &t, i, s, 1.0, &mut grad_tv, Some(&mut grad_bank), &mut scratch);
    backprop_tanh(&t, &mut grad_bank);
    let grad_v = v
        .iter()
        .zip(&grad_tv)
        .map(|(x, g)| g * (1.0 - x.tanh().powi(2)))
        .collect();
    Ok(LossOutput {
        value,
        grad_v,
        grad_bank,
    })
}

/// Accumulates `scale * dL/dtanh(v)` into `grad_tv` and `scale * dL/dW` into `grad_bank`.
/// Accumulates the single-view L2 loss given `tanh` of every memory row.
/// Gradients go to `tanh(v)` and to the `tanh` rows; the caller applies the
/// outer `tanh` derivatives.
#[allow(clippy::too_many_arguments)]
pub(crate) fn l2_singleview_accumulate(
    v: &[f64],
    tanh_rows: &Matrix,
    i: usize,
    s: f64,
    scale: f64,
    grad_tv: &mut [f64],
    grad_rows: Option<&mut Matrix>,
    scratch: &mut Vec<f64>,
) -> f64 {
    let tv: Vec<f64> = v.iter().map(|x| x.tanh()).collect();
    scratch.clear();
    scratch.extend(tanh_rows.iter_rows().map(|r| s * dot(r, &tv)));
    let (max, tail) = log_sum_exp_parts(scratch);
    let lse = max + tail;
    let value = (max - scratch[i]) + tail;
    let mut grad_rows = grad_rows;
    for (j, row) in tanh_rows.iter_rows().enumerate() {
        let p = (scratch[j] - lse).exp();
        let dlogit = scale * s * (p - if j == i { 1.0 } else { 0.0 });
        if dlogit == 0.0 {
            continue;
        }
        for (g, tw) in grad_tv.iter_mut().zip(row) {
            *g += dlogit * tw;
        }
        if let Some(g) = grad_rows.as_deref_mut() {
            for (g, t) in g.row_mut(j).iter_mut().zip(&tv) {
                *g += dlogit * t;
            }
        }
    }
    value
}

/// Elementwise `tanh` of a matrix.
pub(crate) fn tanh_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|x| *x = x.tanh());
    out
}

/// Chain `grad` through an elementwise `tanh` whose outputs are `t`.
pub(crate) fn backprop_tanh(t: &Matrix, grad: &mut Matrix) {
    for (g, t) in grad.as_mut_slice().iter_mut().zip(t.as_slice()) {
        *g *= 1.0 - t * t;
    }
}

/// Prototype attraction loss `sum_p |T_p - w|_1`.
#[derive(Debug, Clone)]
pub struct AttentionLoss {
    pub value: f64,
    pub grad_w: Vec<f64>,
    pub grad_t: Option<Matrix>,
}

pub fn loss_attention(t: &LocalFeatureMap, w: &Prototype, with_grad_t: bool) -> Result<AttentionLoss> {
    if t.channels() != w.len() {
        return Err(Error::domain("prototype and feature map channel counts differ"));
    }
    let mut grad_w = vec![0.0; w.len()];
    let value = attention_loss_accumulate(t, w, 1.0, &mut grad_w);
    let grad_t = with_grad_t.then(|| {
        let mut g = Matrix::zeros(t.positions(), t.channels());
        for p in 0..t.positions() {
            for (o, (x, y)) in g.row_mut(p).iter_mut().zip(t.position(p).iter().zip(w.as_slice())) {
                *o = sign0(x - y);
            }
        }
        g
    });
    Ok(AttentionLoss {
        value,
        grad_w,
        grad_t,
    })
}

pub(crate) fn attention_loss_accumulate(t: &LocalFeatureMap, w: &Prototype, scale: f64, grad_w: &mut [f64]) -> f64 {
    let mut value = 0.0;
    for p in 0..t.positions() {
        for ((x, y), g) in t.position(p).iter().zip(w.as_slice()).zip(grad_w.iter_mut()) {
            value += (x - y).abs();
            *g += scale * sign0(y - x);
        }
    }
    value
}

/// Components of the combined objective for one sample.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub nhd: LossOutput,
    pub pseudo: Option<LossOutput>,
    pub att: Option<AttentionLoss>,
}

/// `L_nhd + lambda_pseudo * L_pseudo + lambda_att * L_att` and its gradients.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub grad_v: Vec<f64>,
    pub grad_bank: Matrix,
    pub grad_clusters: Option<Matrix>,
    pub grad_w_att: Option<Vec<f64>>,
}

pub fn total_loss(parts: &LossParts, lambda_pseudo: f64, lambda_att: f64) -> Result<TotalLoss> {
    if lambda_pseudo < 0.0 || lambda_att < 0.0 {
        return Err(Error::domain("loss weights must be non-negative"));
    }
    let mut value = parts.nhd.value;
    let mut grad_v = parts.nhd.grad_v.clone();
    let grad_clusters = parts.pseudo.as_ref().map(|p| {
        value += lambda_pseudo * p.value;
        for (g, x) in grad_v.iter_mut().zip(&p.grad_v) {
            *g += lambda_pseudo * x;
        }
        let mut g = Matrix::zeros(p.grad_bank.rows(), p.grad_bank.cols());
        g.add_scaled(&p.grad_bank, lambda_pseudo);
        g
    });
    let grad_w_att = parts.att.as_ref().map(|a| {
        value += lambda_att * a.value;
        a.grad_w.iter().map(|g| lambda_att * g).collect()
    });
    Ok(TotalLoss {
        value,
        grad_v,
        grad_bank: parts.nhd.grad_bank.clone(),
        grad_clusters,
        grad_w_att,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{tanh_normalize, SaturatedVector};
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn softplus(x: f64) -> f64 {
        x.exp().ln_1p()
    }

    #[test]
    fn scalar_examples() {
        assert!((loss_nhd_from_distances(0.0, &[1.0], 8.0) - softplus(-8.0)).abs() < 1e-15);
        assert!((loss_nhd_from_distances(0.0, &[1.0], 8.0) - 3.3535e-4).abs() < 1e-7);
        for d in [0.0, 2.0] {
            let v = loss_nhd_from_distances(2.0, &[d], 8.0);
            assert!((v - 8.000_335_406_372_896).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn ddii_vanishes_at_two_and_is_nonnegative() {
        assert_eq!(loss_nhd_ddii(2.0, &[0.3, 1.7], 8.0), 0.0);
        let mut rng = rng_for(1, 0, 0);
        for _ in 0..1000 {
            let d_ii = rng.gen_range(0.0..=2.0);
            let negs: Vec<f64> = (0..rng.gen_range(0..20)).map(|_| rng.gen_range(0.0..=2.0)).collect();
            assert!(loss_nhd_ddii(d_ii, &negs, rng.gen_range(0.1..16.0)) >= 0.0);
        }
    }

    #[test]
    fn ddij_sign_follows_distance_to_one() {
        let negs = [1.0, 1.5, 0.5];
        assert_eq!(loss_nhd_ddij(0.2, &negs, 0, 8.0).unwrap(), 0.0);
        assert!(loss_nhd_ddij(0.2, &negs, 1, 8.0).unwrap() > 0.0);
        assert!(loss_nhd_ddij(0.2, &negs, 2, 8.0).unwrap() < 0.0);
        assert!(loss_nhd_ddij(0.2, &negs, 3, 8.0).is_err());
    }

    #[test]
    fn distance_derivatives_match_finite_differences() {
        let mut rng = rng_for(2, 0, 0);
        let h = 1e-6;
        for _ in 0..200 {
            let s = 8.0;
            let d_ii = rng.gen_range(0.05..1.95);
            let negs: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..1.95)).collect();
            let num = (loss_nhd_from_distances(d_ii + h, &negs, s) - loss_nhd_from_distances(d_ii - h, &negs, s)) / (2.0 * h);
            let ana = loss_nhd_ddii(d_ii, &negs, s);
            assert!((num - ana).abs() <= 1e-6 * ana.abs().max(1e-3), "{num} {ana}");
            let j = rng.gen_range(0..5);
            let mut up = negs.clone();
            up[j] += h;
            let mut dn = negs.clone();
            dn[j] -= h;
            let num = (loss_nhd_from_distances(d_ii, &up, s) - loss_nhd_from_distances(d_ii, &dn, s)) / (2.0 * h);
            let ana = loss_nhd_ddij(d_ii, &negs, j, s).unwrap();
            assert!((num - ana).abs() <= 1e-6 * ana.abs().max(1e-3), "{num} {ana}");
        }
    }

    #[test]
    fn softmax_on_saturated_rows_reproduces_scalar_example() {
        // Row 0 equals the sample, row 1 sits at distance exactly 1.
        let vhat = [0.5, 0.5];
        let rows = Matrix::from_rows(&[vec![0.5, 0.5], vec![-0.5, -0.5]]).unwrap();
        let mut g = [0.0; 2];
        let mut scratch = Vec::new();
        let v = nhd_softmax_saturated(&vhat, &rows, 0, 8.0, 1.0, &mut g, None, &mut scratch);
        assert!((v - softplus(-8.0)).abs() < 1e-15);
        // Same arithmetic through the cluster memory.
        let mem = ClusterMemory::new(rows, vec![0]).unwrap();
        let mut g = [0.0; 2];
        let v = nhd_softmax_saturated(&vhat, mem.centers(), 0, 8.0, 1.0, &mut g, None, &mut scratch);
        assert!((v - 3.3535e-4).abs() < 1e-7);
    }

    #[test]
    fn pseudo_with_a_single_cluster_is_zero() {
        let mem = ClusterMemory::new(Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap(), vec![0, 0]).unwrap();
        let out = loss_pseudo(&[0.3, 0.1, -0.4], 0, &mem, 8.0, 8.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_v.iter().all(|&g| g == 0.0));
        assert!(loss_pseudo(&[0.3, 0.1, -0.4], 1, &mem, 8.0, 8.0).is_err());
    }

    #[test]
    fn pseudo_two_cluster_example() {
        // Centers are raw rows; pick them so the saturated distances are 0 and 1.
        let v = [1.0, 1.0, 1.0, 1.0];
        let c1 = [1.0, 1.0, -1.0, -1.0];
        let vh = tanh_normalize(&v, 8.0).unwrap();
        let ch = tanh_normalize(&c1, 8.0).unwrap();
        let d = crate::feature::nhd_real(&vh, &ch).unwrap();
        let mem = ClusterMemory::new(Matrix::from_rows(&[v.to_vec(), c1.to_vec()]).unwrap(), vec![0]).unwrap();
        let out = loss_pseudo(&v, 0, &mem, 8.0, 8.0).unwrap();
        assert!((out.value - loss_nhd_from_distances(0.0, &[d], 8.0)).abs() < 1e-15);
        // tanh(4) saturation keeps d within 1e-3 of 1, so the value is near softplus(-8).
        assert!((d - 1.0).abs() < 2e-3);
        assert!((out.value - 3.3535e-4).abs() < 1e-5);
    }

    #[test]
    fn l2_single_row_is_zero() {
        let bank = MemoryBank(Matrix::from_rows(&[vec![0.4, -0.2]]).unwrap());
        let out = loss_l2_singleview(&[1.0, 2.0], 0, &bank, 8.0).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn l2_opposed_rows_example() {
        let n = 3;
        let wi = vec![10.0; 4];
        let mut rows = vec![wi.clone()];
        rows.extend((1..n).map(|_| vec![-10.0; 4]));
        let bank = MemoryBank(Matrix::from_rows(&rows).unwrap());
        let out = loss_l2_singleview(&wi, 0, &bank, 8.0).unwrap();
        // Scalar oracle: logits +-32 tanh^2(10).
        let t2 = 10f64.tanh().powi(2);
        let pos = 32.0 * t2;
        let expected = ((n - 1) as f64 * (-2.0 * pos).exp()).ln_1p();
        assert!((out.value - expected).abs() <= 1e-12 * expected);
        assert!((out.value / (2.0 * (-64.0f64).exp()) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn lse_shift_invariance() {
        let negs = [0.2, 0.9, 1.7];
        let direct = loss_nhd_from_distances(0.4, &negs, 8.0);
        let (z, logits) = nhd_logits(0.4, &negs, 8.0);
        for shift in [-500.0, -3.0, 250.0] {
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let v = log_sum_exp(&shifted) - (z + shift);
            assert!((v - direct).abs() <= 1e-10 * direct.abs());
        }
    }

    #[test]
    fn attention_loss_examples() {
        let t = LocalFeatureMap::from_positions(&[vec![0.0], vec![2.0]]).unwrap();
        let out = loss_attention(&t, &Prototype(vec![1.0]), true).unwrap();
        assert_eq!(out.value, 2.0);
        assert_eq!(out.grad_w, vec![0.0]);
        let t = LocalFeatureMap::from_positions(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(loss_attention(&t, &Prototype(vec![1.0, 2.0]), false).unwrap().value, 0.0);
        assert!(loss_attention(&t, &Prototype(vec![1.0]), false).is_err());
    }

    #[test]
    fn total_loss_is_linear() {
        let mk = |value: f64, g: f64| LossOutput {
            value,
            grad_v: vec![g, 2.0 * g],
            grad_bank: Matrix::from_vec(1, 2, vec![g, g]).unwrap(),
        };
        let parts = LossParts {
            nhd: mk(0.1, 1.0),
            pseudo: Some(mk(0.2, 3.0)),
            att: Some(AttentionLoss { value: 0.3, grad_w: vec![5.0], grad_t: None }),
        };
        let t = total_loss(&parts, 1.0, 1.0).unwrap();
        assert!((t.value - 0.6).abs() < 1e-15);
        let t = total_loss(&parts, 0.5, 2.0).unwrap();
        assert_eq!(t.grad_v, vec![1.0 + 1.5, 2.0 + 3.0]);
        assert_eq!(t.grad_clusters.unwrap().as_slice(), &[1.5, 1.5]);
        assert_eq!(t.grad_w_att.unwrap(), vec![10.0]);
        let t = total_loss(&parts, 0.0, 0.0).unwrap();
        assert_eq!(t.value, 0.1);
        assert!(total_loss(&parts, -1.0, 0.0).is_err());
    }

    #[test]
    fn saturated_vector_wrapper_feeds_loss_helpers() {
        let a = SaturatedVector::new(vec![0.1, -0.2]).unwrap();
        assert_eq!(a.len(), 2);
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(
            d_ii in 0f64..=2.0,
            negs in proptest::collection::vec(0f64..=2.0, 0..30),
            s in 0.1f64..16.0,
        ) {
            prop_assert!(loss_nhd_from_distances(d_ii, &negs, s) >= 0.0);
        }

        #[test]
        fn negative_gradient_sign_is_exact(
            d_ii in 0f64..=2.0,
            negs in proptest::collection::vec(0f64..=2.0, 1..30),
            s in 0.1f64..16.0,
        ) {
            for (j, d) in negs.iter().enumerate() {
                let g = loss_nhd_ddij(d_ii, &negs, j, s).unwrap();
                if (d - 1.0).abs() > 1e-9 {
                    prop_assert_eq!(g.signum(), (d - 1.0).signum());
                }
            }
        }
    }
}
