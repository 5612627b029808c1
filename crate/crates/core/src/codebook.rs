//! Clustering-based codes: one two-centroid codebook per bit.
//!
//! Bit `k` is the identity of the centroid of codebook `k` nearest to the fused
//! feature `z`. The continuous surrogate fed to the Hamming-space losses is the
//! distance difference `v'_k = |z - mu0_k| - |z - mu1_k|`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hamming::BitCode;
use crate::matrix::{l2_norm, Matrix};
use crate::rng::{rng_for, stream};

/// Minimum distance between the two centroids of a codebook after init.
pub const EPS_SEP: f64 = 1e-6;

/// Scale of the Gaussian jitter added to the data-anchored initial centroids.
const INIT_JITTER: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    /// `2l x D`; row `2k` is `mu0` and row `2k + 1` is `mu1` of codebook `k`.
    pub centroids: Matrix,
}

impl CodebookSet {
    pub fn new(centroids: Matrix) -> Result<Self> {
        if centroids.rows() == 0 || centroids.rows() % 2 != 0 || centroids.cols() == 0 {
            return Err(Error::domain("codebook centroids must have 2l rows and a positive width"));
        }
        if !centroids.is_finite() {
            return Err(Error::domain("codebook centroids are not finite"));
        }
        Ok(Self { centroids })
    }

    /// From explicit `(mu0, mu1)` pairs.
    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = pairs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
        Self::new(Matrix::from_rows(&rows)?)
    }

    /// Each codebook starts at the features of two distinct random samples,
    /// slightly jittered.
    pub fn init(bits: usize, features: &[Vec<f64>], seed: u64) -> Result<Self> {
        let n = features.len();
        if bits == 0 || n < 2 {
            return Err(Error::domain("codebook init needs bits >= 1 and at least two samples"));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::domain("codebook init features differ in length"));
        }
        let mut rng = rng_for(seed, stream::CODEBOOK_INIT, 0);
        let mut centroids = Matrix::zeros(2 * bits, dim);
        for k in 0..bits {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            for (row, src) in [(2 * k, i), (2 * k + 1, j)] {
                for (c, x) in centroids.row_mut(row).iter_mut().zip(&features[src]) {
                    *c = x + INIT_JITTER * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let sep: f64 = centroids
                .row(2 * k)
                .iter()
                .zip(centroids.row(2 * k + 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if sep < EPS_SEP {
                centroids.row_mut(2 * k + 1)[0] += EPS_SEP;
            }
        }
        Self::new(centroids)
    }

    pub fn bits(&self) -> usize {
        self.centroids.rows() / 2
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn mu0(&self, k: usize) -> &[f64] {
        self.centroids.row(2 * k)
    }

    pub fn mu1(&self, k: usize) -> &[f64] {
        self.centroids.row(2 * k + 1)
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::domain(format!(
                "feature of length {} for codebooks of width {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `v'_k = |z - mu0_k| - |z - mu1_k|`; positive means closer to `mu1`.
pub fn deltas(z: &[f64], cb: &CodebookSet) -> Result<Vec<f64>> {
    cb.check_dim(z)?;
    Ok((0..cb.bits()).map(|k| dist(z, cb.mu0(k)) - dist(z, cb.mu1(k))).collect())
}

/// Reverse pass of `deltas` for upstream `dL/dv'`.
///
/// Accumulates into `grad_z` and `grad_centroids` (either may be skipped).
/// The gradient of a Euclidean norm at zero is taken as zero.
pub fn deltas_backward_into(
    z: &[f64],
    cb: &CodebookSet,
    upstream: &[f64],
    mut grad_z: Option<&mut [f64]>,
    mut grad_centroids: Option<&mut Matrix>,
) {
    for (k, &u) in upstream.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        for (row, sign) in [(2 * k, 1.0), (2 * k + 1, -1.0)] {
            let mu = cb.centroids.row(row);
            let d = dist(z, mu);
            if d == 0.0 {
                continue;
            }
            let scale = sign * u / d;
            if let Some(gz) = grad_z.as_deref_mut() {
                for ((g, x), m) in gz.iter_mut().zip(z).zip(mu) {
                    *g += scale * (x - m);
                }
            }
            if let Some(gc) = grad_centroids.as_deref_mut() {
                for ((g, x), m) in gc.row_mut(row).iter_mut().zip(z).zip(mu) {
                    *g -= scale * (x - m);
                }
            }
        }
    }
}

/// Bit `k` is set iff `z` is strictly closer to `mu1_k`; ties give 0.
pub fn codebook_encode(z: &[f64], cb: &CodebookSet) -> Result<BitCode> {
    let d = deltas(z, cb)?;
    BitCode::from_bools(&d.iter().map(|&x| x > 0.0).collect::<Vec<_>>())
}

/// Student-t soft assignments `q[j][k] = (q_j0, q_j1)` of every row of `zs`.
fn soft_assignments(zs: &Matrix, cb: &CodebookSet) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let l = cb.bits();
    let mut q = Vec::with_capacity(zs.rows() * l);
    let mut w = Vec::with_capacity(zs.rows() * l);
    for z in zs.iter_rows() {
        for k in 0..l {
            let w0 = 1.0 / (1.0 + dist(z, cb.mu0(k)).powi(2));
            let w1 = 1.0 / (1.0 + dist(z, cb.mu1(k)).powi(2));
            let total = w0 + w1;
            q.push([w0 / total, w1 / total]);
            w.push([w0, w1]);
        }
    }
    (q, w)
}

/// Sharpened targets `p = (q^2 / f) / sum(q^2 / f)` with `f` the soft
/// cluster frequencies over the batch. Indexed `[j * l + k]`.
pub fn dec_targets(zs: &Matrix, cb: &CodebookSet) -> Result<Vec<[f64; 2]>> {
    check_batch(zs, cb)?;
    let (q, _) = soft_assignments(zs, cb);
    Ok(targets_from(&q, zs.rows(), cb.bits()))
}

fn targets_from(q: &[[f64; 2]], n: usize, l: usize) -> Vec<[f64; 2]> {
    let mut f = vec![[0.0; 2]; l];
    for j in 0..n {
        for k in 0..l {
            f[k][0] += q[j * l + k][0];
            f[k][1] += q[j * l + k][1];
        }
    }
    let mut p = Vec::with_capacity(q.len());
    for j in 0..n {
        for k in 0..l {
            let qq = q[j * l + k];
            let a = qq[0] * qq[0] / f[k][0];
            let b = qq[1] * qq[1] / f[k][1];
            p.push([a / (a + b), b / (a + b)]);
        }
    }
    p
}

fn check_batch(zs: &Matrix, cb: &CodebookSet) -> Result<()> {
    if zs.rows() == 0 {
        return Err(Error::domain("DEC loss needs at least one feature"));
    }
    cb.check_dim(zs.row(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecLoss {
    pub value: f64,
    pub grad_centroids: Matrix,
    pub grad_z: Matrix,
}

/// Mean over codebooks of `sum_j KL(p_j || q_j)`, targets held constant.
pub fn dec_loss(zs: &Matrix, cb: &CodebookSet) -> Result<DecLoss> {
    let p = dec_targets(zs, cb)?;
    dec_loss_with_targets(zs, cb, &p)
}

/// DEC loss against caller-supplied targets (indexed `[j * l + k]`).
pub fn dec_loss_with_targets(zs: &Matrix, cb: &CodebookSet, p: &[[f64; 2]]) -> Result<DecLoss> {
    check_batch(zs, cb)?;
    let l = cb.bits();
    if p.len() != zs.rows() * l {
        return Err(Error::domain("DEC targets do not match the batch"));
    }
    let (q, w) = soft_assignments(zs, cb);
    let mut grad_centroids = Matrix::zeros(cb.centroids.rows(), cb.dim());
    let mut grad_z = Matrix::zeros(zs.rows(), zs.cols());
    let mut value = 0.0;
    let inv_l = 1.0 / l as f64;
    for (j, z) in zs.iter_rows().enumerate() {
        for k in 0..l {
            let idx = j * l + k;
            let mut kl = 0.0;
            for c in 0..2 {
                let (pc, qc) = (p[idx][c], q[idx][c]);
                if pc > 0.0 {
                    kl += pc * (pc / qc).ln();
                }
                // dL/dd = w (p - q), d = |z - mu|^2.
                let coef = 2.0 * inv_l * w[idx][c] * (pc - qc);
                if coef == 0.0 {
                    continue;
                }
                let row = 2 * k + c;
                let mu = cb.centroids.row(row);
                for (i, (x, m)) in z.iter().zip(mu).enumerate() {
                    let diff = coef * (x - m);
                    grad_z.row_mut(j)[i] += diff;
                    grad_centroids.row_mut(row)[i] -= diff;
                }
            }
            // Each KL term is non-negative; when p = q rounding can leave -1e-16.
            value += kl.max(0.0);
        }
    }
    Ok(DecLoss {
        value: value * inv_l,
        grad_centroids,
        grad_z,
    })
}

/// Average distance between the two centroids of each codebook.
pub fn mean_separation(cb: &CodebookSet) -> f64 {
    (0..cb.bits())
        .map(|k| l2_norm(&cb.mu0(k).iter().zip(cb.mu1(k)).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .sum::<f64>()
        / cb.bits() as f64
}
