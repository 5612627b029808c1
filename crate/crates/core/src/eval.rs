//! Hamming ranking, mean average precision, collision census and NHD histograms.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hamming::{collision_counts, hamming_words, PackedCodeSet};
use crate::rng::{rng_for, stream};

/// One query's ranked database indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub indices: Vec<u32>,
    pub distances: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalResult {
    pub rankings: Vec<Ranking>,
    pub top_k: Option<usize>,
}

fn check_same_len(a: &PackedCodeSet, b: &PackedCodeSet) -> Result<()> {
    if a.bits() != b.bits() {
        return Err(Error::domain(format!(
            "code lengths differ: {} vs {}",
            a.bits(),
            b.bits()
        )));
    }
    Ok(())
}

/// Counting sort of the database by distance to `query`, stable by index.
///
/// `skip` leaves one database index out (self-retrieval).
fn rank_one(
    query: &[u64],
    database: &PackedCodeSet,
    skip: Option<usize>,
    counts: &mut Vec<u32>,
    dist: &mut Vec<u32>,
    order: &mut Vec<u32>,
) {
    let bits = database.bits();
    dist.clear();
    dist.extend(database.iter().map(|row| hamming_words(query, row)));
    counts.clear();
    counts.resize(bits + 2, 0);
    for (j, &d) in dist.iter().enumerate() {
        if Some(j) != skip {
            counts[d as usize + 1] += 1;
        }
    }
    for h in 1..counts.len() {
        counts[h] += counts[h - 1];
    }
    let total = counts[bits + 1] as usize;
    order.clear();
    order.resize(total, 0);
    for (j, &d) in dist.iter().enumerate() {
        if Some(j) != skip {
            let slot = &mut counts[d as usize];
            order[*slot as usize] = j as u32;
            *slot += 1;
        }
    }
}

/// Exact linear-scan ranking of `database` for every query.
pub fn rank_by_hamming(
    queries: &PackedCodeSet,
    database: &PackedCodeSet,
    top_k: Option<usize>,
) -> Result<RetrievalResult> {
    check_same_len(queries, database)?;
    let (mut counts, mut dist, mut order) = (Vec::new(), Vec::new(), Vec::new());
    let rankings = queries
        .iter()
        .map(|q| {
            rank_one(q, database, None, &mut counts, &mut dist, &mut order);
            let k = top_k.map_or(order.len(), |k| k.min(order.len()));
            Ranking {
                indices: order[..k].to_vec(),
                distances: order[..k].iter().map(|&j| dist[j as usize]).collect(),
            }
        })
        .collect();
    Ok(RetrievalResult { rankings, top_k })
}

/// Average precision of one ranked relevance list; `None` without relevant items.
fn average_precision(relevant: impl Iterator<Item = bool>) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, rel) in relevant.enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn finish_map(sum: f64, counted: usize) -> Result<f64> {
    if counted == 0 {
        return Err(Error::domain("no query has a relevant item; mAP is undefined"));
    }
    Ok(sum / counted as f64)
}

/// Mean over queries of AP within the horizon; queries without any relevant
/// retrieved item are left out of the mean.
pub fn mean_ap(
    result: &RetrievalResult,
    query_labels: &[u32],
    db_labels: &[u32],
    top_k: Option<usize>,
) -> Result<f64> {
    if query_labels.len() != result.rankings.len() {
        return Err(Error::domain("query labels do not match the number of rankings"));
    }
    let mut sum = 0.0;
    let mut counted = 0;
    for (ranking, &ql) in result.rankings.iter().zip(query_labels) {
        let k = top_k.map_or(ranking.indices.len(), |k| k.min(ranking.indices.len()));
        let mut rel = Vec::with_capacity(k);
        for &j in &ranking.indices[..k] {
            let label = db_labels
                .get(j as usize)
                .ok_or_else(|| Error::domain(format!("database label {j} missing")))?;
            rel.push(*label == ql);
        }
        if let Some(ap) = average_precision(rel.into_iter()) {
            sum += ap;
            counted += 1;
        }
    }
    finish_map(sum, counted)
}

/// mAP of every code queried against all the others (the query itself is
/// excluded from its own database).
pub fn self_retrieval_map(codes: &PackedCodeSet, labels: &[u32], top_k: Option<usize>) -> Result<f64> {
    if labels.len() != codes.len() {
        return Err(Error::domain("labels do not match the number of codes"));
    }
    let (mut counts, mut dist, mut order) = (Vec::new(), Vec::new(), Vec::new());
    let mut sum = 0.0;
    let mut counted = 0;
    for (q, row) in codes.iter().enumerate() {
        rank_one(row, codes, Some(q), &mut counts, &mut dist, &mut order);
        let k = top_k.map_or(order.len(), |k| k.min(order.len()));
        if let Some(ap) = average_precision(order[..k].iter().map(|&j| labels[j as usize] == labels[q])) {
            sum += ap;
            counted += 1;
        }
    }
    finish_map(sum, counted)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionReport {
    pub p_collision: f64,
    pub n_groups: usize,
    pub largest_group: u64,
    /// Collision probability of a uniform random hash, `2^-l`.
    pub ideal: f64,
}

pub fn collision_report(codes: &PackedCodeSet) -> Result<CollisionReport> {
    let (colliding, total) = collision_counts(codes)?;
    let groups = codes.group_sizes();
    Ok(CollisionReport {
        p_collision: colliding as f64 / total as f64,
        n_groups: groups.len(),
        largest_group: groups.into_iter().max().unwrap_or(0),
        ideal: (-(codes.bits() as f64)).exp2(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NhdHistogram {
    /// Equal-width bins over `[0, 2]`; the value 2 falls in the last bin.
    pub counts: Vec<u64>,
    pub pairs: u64,
    pub mean: f64,
    pub std: f64,
    /// Whether every pair was visited instead of sampled.
    pub enumerated: bool,
}

impl NhdHistogram {
    pub fn bin_width(&self) -> f64 {
        2.0 / self.counts.len() as f64
    }
}

/// Pairwise code NHDs, enumerated when there are at most `n_pairs` distinct
/// pairs and sampled uniformly (with replacement, `i != j`) otherwise.
pub fn nhd_histogram(codes: &PackedCodeSet, n_pairs: u64, bins: usize, seed: u64) -> Result<NhdHistogram> {
    let n = codes.len();
    if n < 2 {
        return Err(Error::domain("an NHD histogram needs at least two codes"));
    }
    if bins == 0 || n_pairs == 0 {
        return Err(Error::domain("bins and n_pairs must be positive"));
    }
    let scale = 2.0 / codes.bits() as f64;
    let mut counts = vec![0u64; bins];
    let (mut sum, mut sum_sq, mut pairs) = (0.0, 0.0, 0u64);
    let mut record = |h: u32| {
        let d = scale * f64::from(h);
        let b = ((d / 2.0 * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
        sum += d;
        sum_sq += d * d;
        pairs += 1;
    };
    let all_pairs = (n as u128) * (n as u128 - 1) / 2;
    let enumerated = all_pairs <= u128::from(n_pairs);
    if enumerated {
        for i in 0..n {
            for j in i + 1..n {
                record(hamming_words(codes.row_words(i), codes.row_words(j)));
            }
        }
    } else {
        let mut rng = rng_for(seed, stream::HISTOGRAM, 0);
        for _ in 0..n_pairs {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            record(hamming_words(codes.row_words(i), codes.row_words(j)));
        }
    }
    let m = pairs as f64;
    let mean = sum / m;
    let var = if pairs > 1 {
        ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(NhdHistogram {
        counts,
        pairs,
        mean,
        std: var.sqrt(),
        enumerated,
    })
}

/// Line-oriented `key<TAB>value` report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    /// Floats use the shortest representation that reads back exactly.
    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.entries.push((key.into(), format!("{value:?}")));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Parse text produced by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("report line without a tab: {line:?}")))?;
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}\t{v}")?;
        }
        Ok(())
    }
}

impl CollisionReport {
    pub fn to_report(&self) -> Report {
        let mut r = Report::new();
        r.push_f64("p_collision", self.p_collision)
            .push("n_groups", self.n_groups)
            .push("largest_group", self.largest_group)
            .push_f64("ideal", self.ideal);
        r
    }
}

impl NhdHistogram {
    pub fn to_report(&self) -> Report {
        let mut r = Report::new();
        r.push("pairs", self.pairs)
            .push("enumerated", self.enumerated)
            .push_f64("mean", self.mean)
            .push_f64("std", self.std);
        let w = self.bin_width();
        for (b, c) in self.counts.iter().enumerate() {
            r.push(format!("bin[{:.4},{:.4})", b as f64 * w, (b + 1) as f64 * w), c);
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamming::{hamming, BitCode};

    fn set(bits: usize, codes: &[&[bool]]) -> PackedCodeSet {
        let codes: Vec<BitCode> = codes.iter().map(|c| BitCode::from_bools(c).unwrap()).collect();
        PackedCodeSet::from_codes(bits, &codes).unwrap()
    }

    fn random_set(seed: u64, n: usize, bits: usize) -> PackedCodeSet {
        let mut rng = rng_for(seed, 0x77, 0);
        let codes: Vec<BitCode> = (0..n)
            .map(|_| BitCode::from_bools(&(0..bits).map(|_| rng.gen_bool(0.5)).collect::<Vec<_>>()).unwrap())
            .collect();
        PackedCodeSet::from_codes(bits, &codes).unwrap()
    }

    #[test]
    fn ranking_examples() {
        let db = set(3, &[&[true, true, true], &[false, false, false], &[true, false, false]]);
        let q = set(3, &[&[false, false, false]]);
        let r = rank_by_hamming(&q, &db, None).unwrap();
        assert_eq!(r.rankings[0].indices, vec![1, 2, 0]);
        assert_eq!(r.rankings[0].distances, vec![0, 1, 3]);
        let one = set(3, &[&[true, false, true]]);
        assert_eq!(rank_by_hamming(&q, &one, None).unwrap().rankings[0].indices, vec![0]);
        assert_eq!(rank_by_hamming(&q, &db, Some(2)).unwrap().rankings[0].indices, vec![1, 2]);
        assert!(rank_by_hamming(&q, &set(2, &[&[true, true]]), None).is_err());
    }

    #[test]
    fn ranking_matches_sorted_distances() {
        for seed in 0..20 {
            let db = random_set(seed, 16, 10);
            let q = random_set(seed + 100, 4, 10);
            let r = rank_by_hamming(&q, &db, None).unwrap();
            for (qi, ranking) in r.rankings.iter().enumerate() {
                let mut expect: Vec<(u32, u32)> = (0..16)
                    .map(|j| (hamming(&q.code(qi), &db.code(j)).unwrap(), j as u32))
                    .collect();
                expect.sort();
                assert_eq!(ranking.indices, expect.iter().map(|e| e.1).collect::<Vec<_>>());
                assert_eq!(ranking.distances, expect.iter().map(|e| e.0).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn textbook_average_precision() {
        let r = RetrievalResult {
            rankings: vec![Ranking {
                indices: vec![0, 1, 2, 3],
                distances: vec![0, 1, 2, 3],
            }],
            top_k: None,
        };
        let ap = mean_ap(&r, &[7], &[7, 1, 7, 1], None).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(mean_ap(&r, &[1], &[1, 1, 1, 1], None).unwrap(), 1.0);
        assert!(mean_ap(&r, &[9], &[1, 1, 1, 1], None).is_err());
        // The horizon cuts the second hit.
        assert_eq!(mean_ap(&r, &[7], &[7, 1, 7, 1], Some(2)).unwrap(), 1.0);
    }

    #[test]
    fn queries_without_relevant_items_are_excluded() {
        let r = RetrievalResult {
            rankings: vec![
                Ranking { indices: vec![0, 1], distances: vec![0, 0] },
                Ranking { indices: vec![0, 1], distances: vec![0, 0] },
            ],
            top_k: None,
        };
        assert_eq!(mean_ap(&r, &[1, 5], &[1, 2], None).unwrap(), 1.0);
    }

    #[test]
    fn self_retrieval_skips_the_query() {
        let codes = set(2, &[&[true, true], &[true, true], &[false, false]]);
        // Query 2 has no other item with its label and is excluded.
        assert_eq!(self_retrieval_map(&codes, &[0, 0, 1], None).unwrap(), 1.0);
        let m = self_retrieval_map(&codes, &[0, 1, 0], None).unwrap();
        // Query 0 finds 1 (wrong) then 2 (right): AP 1/2. Query 2 ties 0 and 1
        // at distance 2 and index order puts 0 first: AP 1. Query 1 is excluded.
        assert!((m - 0.75).abs() < 1e-15);
    }

    #[test]
    fn collision_report_examples() {
        let distinct = set(2, &[&[true, true], &[true, false], &[false, false]]);
        let r = collision_report(&distinct).unwrap();
        assert_eq!((r.p_collision, r.n_groups, r.largest_group), (0.0, 3, 1));
        assert_eq!(r.ideal, 0.25);
        let same = set(2, &[&[true, false][..]; 4]);
        let r = collision_report(&same).unwrap();
        assert_eq!((r.p_collision, r.n_groups, r.largest_group), (1.0, 1, 4));
        assert_eq!(r.to_report().get("p_collision"), Some("1.0"));
    }

    #[test]
    fn histogram_examples() {
        let same = set(4, &[&[true, false, true, true][..]; 5]);
        let h = nhd_histogram(&same, 100, 8, 0).unwrap();
        assert!(h.enumerated);
        assert_eq!(h.counts[0], 10);
        assert_eq!((h.mean, h.std), (0.0, 0.0));

        let codes = random_set(3, 2000, 64);
        let h = nhd_histogram(&codes, 50_000, 32, 1).unwrap();
        assert!(!h.enumerated);
        assert!((h.mean - 1.0).abs() < 0.01, "{}", h.mean);
        assert!((h.std - 0.125).abs() < 0.01, "{}", h.std);
        assert_eq!(h.counts.iter().sum::<u64>(), 50_000);
    }

    #[test]
    fn sampled_histogram_mean_matches_enumeration() {
        let codes = random_set(11, 30, 16);
        let exact = nhd_histogram(&codes, 1_000, 16, 0).unwrap();
        assert!(exact.enumerated);
        let mut mean = 0.0;
        for seed in 0..20 {
            mean += nhd_histogram(&codes, 400, 16, seed).unwrap().mean / 20.0;
        }
        assert!((mean - exact.mean).abs() < 0.01, "{mean} vs {}", exact.mean);
    }

    #[test]
    fn report_round_trip() {
        let mut r = Report::new();
        r.push("a", 3).push_f64("b", 0.1);
        let text = r.to_string();
        assert_eq!(text, "a\t3\nb\t0.1\n");
        assert_eq!(Report::parse(&text).unwrap(), r);
        assert!(Report::parse("no tab").is_err());
    }
}
