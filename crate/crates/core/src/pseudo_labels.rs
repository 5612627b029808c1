//! Pseudo labels from affinity propagation.
//!
//! Affinity propagation elects exemplars by exchanging responsibility and
//! availability messages over a similarity matrix; the number of clusters
//! follows from the self-similarity ("preference") instead of being fixed in
//! advance. Each cluster then becomes a pseudo class with its own learnable
//! row in the cluster memory.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::feature::SaturatedVector;
use crate::losses::ClusterMemory;
use crate::matrix::Matrix;
use crate::rng::{rng_for, stream};

/// Self-similarity placed on the diagonal before message passing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preference {
    /// Median of the off-diagonal similarities.
    Median,
    Value(f64),
    /// Keep whatever the caller put on the diagonal.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApConfig {
    pub damping: f64,
    pub max_iter: usize,
    pub convergence_window: usize,
    pub preference: Preference,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            damping: 0.7,
            max_iter: 200,
            convergence_window: 15,
            preference: Preference::Median,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.damping) {
            return Err(Error::domain(format!(
                "damping {} outside [0.5, 1)",
                self.damping
            )));
        }
        if self.max_iter == 0 || self.convergence_window == 0 {
            return Err(Error::domain("max_iter and convergence_window must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    /// Sample index of each exemplar, in increasing order.
    pub exemplars: Vec<usize>,
    /// Cluster slot of each sample.
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.exemplars.len()
    }
}

/// Median of the off-diagonal entries (mean of the two middle values when
/// their count is even).
pub fn off_diagonal_median(s: &Matrix) -> f64 {
    let n = s.rows();
    let mut vals: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for (k, &x) in s.row(i).iter().enumerate() {
            if k != i {
                vals.push(x);
            }
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let count = vals.len();
    let mid = count / 2;
    let (lower, upper, _) = vals.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if count % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

/// Negative squared Euclidean distances, diagonal set to the median preference.
pub fn build_similarity(features: &[SaturatedVector]) -> Result<Matrix> {
    let n = features.len();
    if n < 2 {
        return Err(Error::domain("similarity needs at least two features"));
    }
    let l = features[0].len();
    if features.iter().any(|f| f.len() != l) {
        return Err(Error::domain("features differ in length"));
    }
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = features[i]
                .as_slice()
                .iter()
                .zip(features[j].as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            s.row_mut(i)[j] = -d;
            s.row_mut(j)[i] = -d;
        }
    }
    let pref = off_diagonal_median(&s);
    for i in 0..n {
        s.row_mut(i)[i] = pref;
    }
    Ok(s)
}

fn validate_similarity(s: &Matrix) -> Result<()> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::domain("similarity matrix must be square"));
    }
    if n < 2 {
        return Err(Error::domain("affinity propagation needs at least two points"));
    }
    if !s.is_finite() {
        return Err(Error::domain("similarity matrix has non-finite entries"));
    }
    for i in 0..n {
        for k in i + 1..n {
            if s.row(i)[k] != s.row(k)[i] {
                return Err(Error::domain(format!(
                    "similarity matrix is not symmetric at ({i}, {k})"
                )));
            }
        }
    }
    Ok(())
}

/// Damped responsibility update of one row. The uniform update runs over the
/// whole row and the best column is patched afterwards.
fn responsibility_row(srow: &[f64], arow: &[f64], rrow: &mut [f64], tmp: &mut [f64], damp: f64) {
    for ((t, x), y) in tmp.iter_mut().zip(arow).zip(srow) {
        *t = x + y;
    }
    let mut best_k = 0;
    for k in 1..tmp.len() {
        if tmp[k] > tmp[best_k] {
            best_k = k;
        }
    }
    let best = tmp[best_k];
    let second = tmp[..best_k]
        .iter()
        .chain(&tmp[best_k + 1..])
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let keep = rrow[best_k];
    for (rv, &sv) in rrow.iter_mut().zip(srow) {
        *rv = damp * *rv + (1.0 - damp) * (sv - best);
    }
    rrow[best_k] = damp * keep + (1.0 - damp) * (srow[best_k] - second);
}

fn assign(s: &Matrix, exemplars: &[usize]) -> Vec<usize> {
    (0..s.rows())
        .map(|i| {
            if let Ok(slot) = exemplars.binary_search(&i) {
                return slot;
            }
            let row = s.row(i);
            let mut best = 0;
            for (slot, &k) in exemplars.iter().enumerate() {
                if row[k] > row[exemplars[best]] {
                    best = slot;
                }
            }
            best
        })
        .collect()
}

/// Damped responsibility/availability message passing.
///
/// The diagonal of `s` is replaced according to `cfg.preference`. A tiny
/// deterministic perturbation breaks exact ties between identical points.
pub fn affinity_propagation(s: &Matrix, cfg: &ApConfig) -> Result<Clustering> {
    cfg.validate()?;
    validate_similarity(s)?;
    let n = s.rows();
    let mut s = s.clone();
    let pref = match cfg.preference {
        Preference::Median => Some(off_diagonal_median(&s)),
        Preference::Value(p) if p.is_finite() => Some(p),
        Preference::Value(p) => return Err(Error::domain(format!("preference {p} is not finite"))),
        Preference::Diagonal => None,
    };
    if let Some(p) = pref {
        for i in 0..n {
            s.row_mut(i)[i] = p;
        }
    }

    // All similarities equal to all preferences: messages never move.
    let first_off = s.row(0)[1];
    let off_equal = (0..n).all(|i| s.row(i).iter().enumerate().all(|(k, &x)| k == i || x == first_off));
    let diag_equal = (0..n).all(|i| s.row(i)[i] == s.row(0)[0]);
    if off_equal && diag_equal {
        let (exemplars, assignment) = if s.row(0)[0] > first_off {
            ((0..n).collect(), (0..n).collect())
        } else {
            (vec![0], vec![0; n])
        };
        return Ok(Clustering {
            exemplars,
            assignment,
            iterations: 0,
        });
    }

    let mut rng = rng_for(0, stream::AP_JITTER, n as u64);
    for x in s.as_mut_slice() {
        let z: f64 = rng.sample(StandardNormal);
        *x += (f64::EPSILON * *x + f64::MIN_POSITIVE * 100.0) * z;
    }

    let damp = cfg.damping;
    let mut r = Matrix::zeros(n, n);
    let mut a = Matrix::zeros(n, n);
    let mut col_pos = vec![0.0; n];
    let mut next_pos = vec![0.0; n];
    let mut base = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut previous: Vec<usize> = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(n);
    let mut stable = 0;
    let mut iterations = 0;

    for i in 0..n {
        responsibility_row(s.row(i), a.row(i), r.row_mut(i), &mut tmp, damp);
        for (acc, &x) in col_pos.iter_mut().zip(r.row(i)) {
            *acc += x.max(0.0);
        }
    }
    // Row i of the next responsibilities needs only row i of the availabilities,
    // so each sweep updates a row of availabilities and immediately the
    // matching row of responsibilities.
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let last = it + 1 == cfg.max_iter;
        for k in 0..n {
            col_pos[k] -= r.row(k)[k].max(0.0);
            base[k] = r.row(k)[k] + col_pos[k];
        }
        next_pos.iter_mut().for_each(|x| *x = 0.0);
        current.clear();
        for i in 0..n {
            let rrow = r.row_mut(i);
            let arow = a.row_mut(i);
            let keep = arow[i];
            for ((av, &rv), &b) in arow.iter_mut().zip(rrow.iter()).zip(&base) {
                *av = damp * *av + (1.0 - damp) * (b - rv.max(0.0)).min(0.0);
            }
            arow[i] = damp * keep + (1.0 - damp) * col_pos[i];
            if rrow[i] + arow[i] > 0.0 {
                current.push(i);
            }
            if !last {
                responsibility_row(s.row(i), arow, rrow, &mut tmp, damp);
                for (acc, &x) in next_pos.iter_mut().zip(rrow.iter()) {
                    *acc += x.max(0.0);
                }
            }
        }
        std::mem::swap(&mut col_pos, &mut next_pos);

        if current == previous {
            stable += 1;
        } else {
            stable = 1;
            std::mem::swap(&mut previous, &mut current);
        }
        if stable >= cfg.convergence_window && !previous.is_empty() {
            break;
        }
    }

    let exemplars = previous;
    if exemplars.is_empty() {
        return Err(Error::NoExemplars { epoch: None });
    }
    let assignment = assign(&s, &exemplars);
    Ok(Clustering {
        exemplars,
        assignment,
        iterations,
    })
}

/// Fresh cluster memory: row `c` is the mean raw feature of cluster `c`.
pub fn refresh_cluster_memory(clustering: &Clustering, features: &Matrix) -> Result<ClusterMemory> {
    if clustering.assignment.len() != features.rows() {
        return Err(Error::domain("clustering and features disagree on sample count"));
    }
    let nc = clustering.n_clusters();
    let mut centers = Matrix::zeros(nc, features.cols());
    let mut counts = vec![0usize; nc];
    for (i, &c) in clustering.assignment.iter().enumerate() {
        counts[c] += 1;
        for (acc, x) in centers.row_mut(c).iter_mut().zip(features.row(i)) {
            *acc += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::domain(format!("cluster {c} has no members")));
        }
        let inv = 1.0 / n as f64;
        centers.row_mut(c).iter_mut().for_each(|x| *x *= inv);
    }
    ClusterMemory::new(centers, clustering.assignment.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::tanh_normalize;
    use rand_distr::StandardNormal;

    fn neg_sq_dist_1d(xs: &[f64]) -> Matrix {
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .map(|a| xs.iter().map(|b| -(a - b) * (a - b)).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn median_of_off_diagonal() {
        let s = neg_sq_dist_1d(&[0.0, 0.1, 10.0, 10.1]);
        assert!((off_diagonal_median(&s) - (-99.005)).abs() < 1e-9);
    }

    #[test]
    fn two_separated_pairs() {
        let s = neg_sq_dist_1d(&[0.0, 0.1, 10.0, 10.1]);
        let c = affinity_propagation(&s, &ApConfig::default()).unwrap();
        assert_eq!(c.n_clusters(), 2);
        assert_eq!(c.assignment[0], c.assignment[1]);
        assert_eq!(c.assignment[2], c.assignment[3]);
        assert_ne!(c.assignment[0], c.assignment[2]);
    }

    #[test]
    fn identical_pair_is_one_cluster() {
        let s = neg_sq_dist_1d(&[1.5, 1.5]);
        let c = affinity_propagation(&s, &ApConfig::default()).unwrap();
        assert_eq!(c.n_clusters(), 1);
        assert_eq!(c.assignment, vec![0, 0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut s = neg_sq_dist_1d(&[0.0, 1.0, 2.0]);
        s.row_mut(0)[1] = -5.0;
        assert!(matches!(affinity_propagation(&s, &ApConfig::default()), Err(Error::Domain(_))));
        let mut s = neg_sq_dist_1d(&[0.0, 1.0]);
        s.row_mut(0)[1] = f64::NAN;
        assert!(affinity_propagation(&s, &ApConfig::default()).is_err());
        let bad = ApConfig { damping: 0.3, ..ApConfig::default() };
        assert!(affinity_propagation(&neg_sq_dist_1d(&[0.0, 1.0]), &bad).is_err());
        assert!(affinity_propagation(&neg_sq_dist_1d(&[0.0]), &ApConfig::default()).is_err());
    }

    fn blobs(seed: u64, groups: usize, per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_for(seed, 99, 0);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        let centers: Vec<Vec<f64>> = (0..groups)
            .map(|g| {
                // Place centers on a ring so every pair is at least ~10 apart.
                let angle = g as f64 * std::f64::consts::TAU / groups as f64;
                vec![30.0 * angle.cos(), 30.0 * angle.sin(), rng.gen_range(-1.0..1.0)]
            })
            .collect();
        for (g, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(c.iter().map(|x| x + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect());
                labels.push(g);
            }
        }
        (pts, labels)
    }

    #[test]
    fn recovers_well_separated_groups() {
        for seed in 0..20 {
            let groups = 2 + (seed as usize % 5);
            let (pts, labels) = blobs(seed, groups, 3 + seed as usize % 7);
            let rows: Vec<Vec<f64>> = pts
                .iter()
                .map(|a| pts.iter().map(|b| -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).collect())
                .collect();
            let s = Matrix::from_rows(&rows).unwrap();
            // Any preference between the within-group and between-group
            // similarities separates the groups exactly.
            let cfg = ApConfig {
                preference: Preference::Value(-100.0),
                ..ApConfig::default()
            };
            let c = affinity_propagation(&s, &cfg).unwrap();
            assert_eq!(c.n_clusters(), groups, "seed {seed}");
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    assert_eq!(labels[i] == labels[j], c.assignment[i] == c.assignment[j]);
                }
            }
        }
    }

    #[test]
    fn exemplars_assign_to_themselves_and_runs_repeat() {
        let (pts, _) = blobs(4, 5, 8);
        let feats: Vec<SaturatedVector> = pts.iter().map(|p| tanh_normalize(p, 8.0).unwrap()).collect();
        let s = build_similarity(&feats).unwrap();
        let c = affinity_propagation(&s, &ApConfig::default()).unwrap();
        for (slot, &e) in c.exemplars.iter().enumerate() {
            assert_eq!(c.assignment[e], slot);
        }
        assert!(c.assignment.iter().all(|&a| a < c.n_clusters()));
        assert_eq!(c, affinity_propagation(&s, &ApConfig::default()).unwrap());
    }

    #[test]
    fn similarity_examples() {
        let same = vec![tanh_normalize(&[1.0, -1.0], 8.0).unwrap(); 3];
        let s = build_similarity(&same).unwrap();
        assert!(s.as_slice().iter().all(|&x| x == 0.0));
        let a = SaturatedVector::new(vec![0.5, 0.0]).unwrap();
        let b = SaturatedVector::new(vec![0.0, 0.5]).unwrap();
        let s = build_similarity(&[a, b]).unwrap();
        assert_eq!(s.row(0)[1], -0.5);
        assert_eq!(s.row(0)[1], s.row(1)[0]);
    }

    #[test]
    fn refresh_uses_cluster_means() {
        let feats = Matrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let c = Clustering { exemplars: vec![0, 2], assignment: vec![0, 0, 1], iterations: 1 };
        let mem = refresh_cluster_memory(&c, &feats).unwrap();
        assert_eq!(mem.centers().row(0), &[1.0, 1.0]);
        assert_eq!(mem.centers().row(1), &[5.0, 5.0]);
        assert_eq!(mem.assignment(), &[0, 0, 1]);
    }
}
