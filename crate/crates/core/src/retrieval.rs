//! Bit-packed Hamming ranking and retrieval metrics.
//!
//! Ranking is exact: every query is compared against every database item via
//! XOR + popcount over packed words, sorted by ascending distance with ties
//! broken by ascending database index. The metrics are mean average precision
//! over the full ranking, precision within a Hamming radius, precision at
//! top-N cutoffs, and a 101-point interpolated precision-recall curve.

use crate::error::{Error, Result};
use crate::pyramid::{words_per_code, BinaryCode};

/// The retrieval database: packed codes plus integer class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodeSet {
    q: usize,
    words: Vec<u64>,
    labels: Vec<u32>,
}

impl BinaryCodeSet {
    pub fn new(q: usize) -> Self {
        BinaryCodeSet { q, words: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, code: &BinaryCode, label: u32) -> Result<()> {
        if code.q() != self.q {
            return Err(Error::contract(
                "code_set",
                format!("code has q={}, set has q={}", code.q(), self.q),
            ));
        }
        self.words.extend_from_slice(code.words());
        self.labels.push(label);
        Ok(())
    }

    pub fn from_parts(q: usize, words: Vec<u64>, labels: Vec<u32>) -> Result<Self> {
        if words.len() != labels.len() * words_per_code(q) {
            return Err(Error::contract(
                "code_set",
                format!("{} labels need {} words, got {}", labels.len(), labels.len() * words_per_code(q), words.len()),
            ));
        }
        Ok(BinaryCodeSet { q, words, labels })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn words_flat(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> BinaryCode {
        let w = words_per_code(self.q);
        BinaryCode::from_words(self.q, self.words[i * w..(i + 1) * w].to_vec())
            .expect("stored codes are valid")
    }

    fn item_words(&self, i: usize) -> &[u64] {
        let w = words_per_code(self.q);
        &self.words[i * w..(i + 1) * w]
    }
}

/// Hamming distance between two equal-length codes.
pub fn hamming_distance(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.q() != b.q() {
        return Err(Error::contract(
            "hamming_distance",
            format!("code lengths differ: {} vs {}", a.q(), b.q()),
        ));
    }
    Ok(a.words().iter().zip(b.words()).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Full ascending-distance ranking of the database for one query.
#[derive(Debug, Clone)]
pub struct RankedResult {
    /// (database index, hamming distance), ascending distance, ties by index.
    pub entries: Vec<(usize, u32)>,
}

pub fn rank_database(query: &BinaryCode, db: &BinaryCodeSet) -> Result<RankedResult> {
    if query.q() != db.q() {
        return Err(Error::contract(
            "rank_database",
            format!("query q={} vs database q={}", query.q(), db.q()),
        ));
    }
    if db.is_empty() {
        return Err(Error::contract("rank_database", "database is empty"));
    }
    let mut entries: Vec<(usize, u32)> = (0..db.len())
        .map(|i| {
            let d: u32 = query.words().iter().zip(db.item_words(i)).map(|(x, y)| (x ^ y).count_ones()).sum();
            (i, d)
        })
        .collect();
    entries.sort_by_key(|&(i, d)| (d, i));
    Ok(RankedResult { entries })
}

/// Average precision over a full ranking's relevance flags.
///
/// `n_plus` is the total number of relevant database items for the query;
/// queries with no relevant items score 0.
pub fn average_precision(relevance: &[bool], n_plus: usize) -> f64 {
    if n_plus == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    acc / n_plus as f64
}

/// Aggregate evaluation numbers for a query set against a database.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub map: f64,
    /// Mean precision of the retrieval sets within `radius`.
    pub precision_at_radius: f64,
    pub radius: u32,
    /// 101 (recall, precision) points at recall levels 0.00..=1.00.
    pub pr_curve: Vec<(f64, f64)>,
    /// (N, mean precision in the top N).
    pub topn_curve: Vec<(usize, f64)>,
    /// Queries excluded from the PR curve for having no relevant item.
    pub pr_excluded_queries: usize,
}

const PR_LEVELS: usize = 101;

fn relevance_of(ranking: &RankedResult, db: &BinaryCodeSet, label: u32) -> Vec<bool> {
    ranking.entries.iter().map(|&(i, _)| db.label(i) == label).collect()
}

pub fn mean_average_precision(queries: &BinaryCodeSet, db: &BinaryCodeSet) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::contract("mean_average_precision", "no queries"));
    }
    let mut total = 0.0;
    for qi in 0..queries.len() {
        let ranking = rank_database(&queries.code(qi), db)?;
        let rel = relevance_of(&ranking, db, queries.label(qi));
        let n_plus = rel.iter().filter(|&&r| r).count();
        total += average_precision(&rel, n_plus);
    }
    Ok(total / queries.len() as f64)
}

/// Mean precision of the items retrieved within Hamming radius `r`.
///
/// A query retrieving nothing within `r` contributes 0 unless
/// `exclude_empty` drops it from the mean.
pub fn precision_within_radius(
    queries: &BinaryCodeSet,
    db: &BinaryCodeSet,
    r: u32,
    exclude_empty: bool,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::contract("precision_within_radius", "no queries"));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for qi in 0..queries.len() {
        let ranking = rank_database(&queries.code(qi), db)?;
        let label = queries.label(qi);
        let mut within = 0usize;
        let mut relevant = 0usize;
        for &(i, d) in &ranking.entries {
            if d > r {
                break;
            }
            within += 1;
            if db.label(i) == label {
                relevant += 1;
            }
        }
        if within == 0 {
            if !exclude_empty {
                counted += 1;
            }
            continue;
        }
        total += relevant as f64 / within as f64;
        counted += 1;
    }
    if counted == 0 {
        return Ok(0.0);
    }
    Ok(total / counted as f64)
}

/// Mean precision within the top N of the canonical ranking, per cutoff.
pub fn precision_at_topn(
    queries: &BinaryCodeSet,
    db: &BinaryCodeSet,
    cutoffs: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if queries.is_empty() {
        return Err(Error::contract("precision_at_topn", "no queries"));
    }
    for &n in cutoffs {
        if n < 1 || n > db.len() {
            return Err(Error::contract(
                "precision_at_topn",
                format!("N={n} outside [1, {}]", db.len()),
            ));
        }
    }
    let mut sums = vec![0.0; cutoffs.len()];
    for qi in 0..queries.len() {
        let ranking = rank_database(&queries.code(qi), db)?;
        let rel = relevance_of(&ranking, db, queries.label(qi));
        let mut prefix = 0usize;
        let mut hits_at: Vec<usize> = Vec::with_capacity(rel.len());
        for &r in &rel {
            if r {
                prefix += 1;
            }
            hits_at.push(prefix);
        }
        for (si, &n) in cutoffs.iter().enumerate() {
            sums[si] += hits_at[n - 1] as f64 / n as f64;
        }
    }
    Ok(cutoffs.iter().zip(sums).map(|(&n, s)| (n, s / queries.len() as f64)).collect())
}

/// 101-point interpolated precision-recall curve, averaged over queries.
///
/// Per query, precision at recall level r is the maximum precision over all
/// ranks whose recall is >= r; queries with no relevant item are excluded and
/// counted in the report.
pub fn pr_curve(queries: &BinaryCodeSet, db: &BinaryCodeSet) -> Result<(Vec<(f64, f64)>, usize)> {
    if queries.is_empty() {
        return Err(Error::contract("pr_curve", "no queries"));
    }
    let mut sums = vec![0.0; PR_LEVELS];
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for qi in 0..queries.len() {
        let ranking = rank_database(&queries.code(qi), db)?;
        let rel = relevance_of(&ranking, db, queries.label(qi));
        let n_plus = rel.iter().filter(|&&r| r).count();
        if n_plus == 0 {
            excluded += 1;
            continue;
        }
        counted += 1;
        // precision/recall at every rank, then max-to-the-right interpolation
        let mut pr: Vec<(f64, f64)> = Vec::with_capacity(rel.len());
        let mut hits = 0usize;
        for (k, &r) in rel.iter().enumerate() {
            if r {
                hits += 1;
            }
            pr.push((hits as f64 / n_plus as f64, hits as f64 / (k + 1) as f64));
        }
        for (li, sum) in sums.iter_mut().enumerate() {
            let level = li as f64 / (PR_LEVELS - 1) as f64;
            let best = pr
                .iter()
                .filter(|&&(rec, _)| rec >= level - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max);
            *sum += best;
        }
    }
    if counted == 0 {
        return Err(Error::contract("pr_curve", "every query lacks a relevant item"));
    }
    let curve = sums
        .iter()
        .enumerate()
        .map(|(li, &s)| (li as f64 / (PR_LEVELS - 1) as f64, s / counted as f64))
        .collect();
    Ok((curve, excluded))
}

/// Run all four metrics with the default radius of 3.
pub fn evaluate(queries: &BinaryCodeSet, db: &BinaryCodeSet, topn: &[usize]) -> Result<MetricReport> {
    let radius = 3;
    let map = mean_average_precision(queries, db)?;
    let precision_at_radius = precision_within_radius(queries, db, radius, false)?;
    let (curve, excluded) = pr_curve(queries, db)?;
    let topn_curve = precision_at_topn(queries, db, topn)?;
    Ok(MetricReport {
        map,
        precision_at_radius,
        radius,
        pr_curve: curve,
        topn_curve,
        pr_excluded_queries: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::binarize;

    fn code_from_bits(bits: &[u8]) -> BinaryCode {
        binarize(&bits.iter().map(|&b| b as f64).collect::<Vec<_>>()).unwrap()
    }

    fn set_of(q: usize, items: &[(&[u8], u32)]) -> BinaryCodeSet {
        let mut s = BinaryCodeSet::new(q);
        for (bits, label) in items {
            s.push(&code_from_bits(bits), *label).unwrap();
        }
        s
    }

    #[test]
    fn hamming_basics() {
        let a = code_from_bits(&[1, 0, 1, 0]);
        let b = code_from_bits(&[0, 1, 1, 0]);
        assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
        assert_eq!(hamming_distance(&a, &b).unwrap(), 2);
        let full = code_from_bits(&[1; 16]);
        let zero = code_from_bits(&[0; 16]);
        assert_eq!(hamming_distance(&full, &zero).unwrap(), 16);
        let other = code_from_bits(&[1, 0]);
        assert!(hamming_distance(&a, &other).is_err());
    }

    #[test]
    fn ranking_self_then_complement() {
        let q = 8;
        let query = code_from_bits(&[1, 0, 1, 0, 1, 0, 1, 0]);
        let comp = code_from_bits(&[0, 1, 0, 1, 0, 1, 0, 1]);
        let mut db = BinaryCodeSet::new(q);
        db.push(&query, 0).unwrap();
        db.push(&comp, 1).unwrap();
        let r = rank_database(&query, &db).unwrap();
        assert_eq!(r.entries, vec![(0, 0), (1, 8)]);
    }

    #[test]
    fn ranking_tie_break_by_index() {
        let db = set_of(4, &[(&[1, 1, 0, 0], 0), (&[1, 1, 0, 0], 1), (&[1, 1, 0, 0], 2)]);
        let r = rank_database(&code_from_bits(&[1, 1, 0, 0]), &db).unwrap();
        assert_eq!(r.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn ranking_rejects_empty_db() {
        let db = BinaryCodeSet::new(4);
        assert!(rank_database(&code_from_bits(&[1, 0, 0, 0]), &db).is_err());
    }

    #[test]
    fn average_precision_hand_cases() {
        // AP([1,0,1]) = (1/2)(1 + 2/3) = 5/6
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true, true], 3), 1.0);
        assert_eq!(average_precision(&[false, false], 0), 0.0);
    }

    #[test]
    fn map_mean_of_aps() {
        // db: two items of class 0, two of class 1; queries crafted so one
        // query has AP 1.0 and the other 0.5.
        let db = set_of(4, &[(&[1, 1, 1, 1], 0), (&[0, 0, 0, 0], 1), (&[1, 1, 0, 0], 1), (&[0, 0, 1, 1], 0)]);
        let mut queries = BinaryCodeSet::new(4);
        // perfect: both class-0 items closest
        queries.push(&code_from_bits(&[1, 1, 1, 1]), 0).unwrap();
        let m = mean_average_precision(&queries, &db).unwrap();
        assert!(m <= 1.0 && m >= 0.0);
        // single query: MAP == its AP
        let single = mean_average_precision(&queries, &db).unwrap();
        assert_eq!(m, single);
    }

    #[test]
    fn radius_precision_hand_case() {
        // query 0000 label 0; 4-item database with distances 0,1,1,4 and
        // labels 0,0,1,0 -> within r=1: 3 items, 2 relevant.
        let db = set_of(
            4,
            &[(&[0, 0, 0, 0], 0), (&[1, 0, 0, 0], 0), (&[0, 1, 0, 0], 1), (&[1, 1, 1, 1], 0)],
        );
        let mut queries = BinaryCodeSet::new(4);
        queries.push(&code_from_bits(&[0, 0, 0, 0]), 0).unwrap();
        let p = precision_within_radius(&queries, &db, 1, false).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);

        // r = q retrieves everything: precision = class prior
        let p = precision_within_radius(&queries, &db, 4, false).unwrap();
        assert!((p - 3.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn radius_precision_empty_retrieval_contributes_zero() {
        let db = set_of(8, &[(&[1; 8], 0)]);
        let mut queries = BinaryCodeSet::new(8);
        queries.push(&code_from_bits(&[0; 8]), 0).unwrap();
        assert_eq!(precision_within_radius(&queries, &db, 3, false).unwrap(), 0.0);
        // excluded variant has no counted queries at all
        assert_eq!(precision_within_radius(&queries, &db, 3, true).unwrap(), 0.0);
    }

    #[test]
    fn topn_bounds_and_prior() {
        let db = set_of(4, &[(&[0, 0, 0, 0], 0), (&[1, 0, 0, 0], 1), (&[1, 1, 0, 0], 1), (&[1, 1, 1, 0], 1)]);
        let mut queries = BinaryCodeSet::new(4);
        queries.push(&code_from_bits(&[0, 0, 0, 0]), 0).unwrap();
        let c = precision_at_topn(&queries, &db, &[1, 4]).unwrap();
        assert_eq!(c[0], (1, 1.0));
        assert_eq!(c[1], (4, 0.25));
        assert!(precision_at_topn(&queries, &db, &[0]).is_err());
        assert!(precision_at_topn(&queries, &db, &[5]).is_err());
    }

    #[test]
    fn pr_curve_perfect_and_hand_case() {
        // perfect ranking: precision 1.0 at every level
        let db = set_of(4, &[(&[0, 0, 0, 0], 0), (&[0, 0, 0, 1], 0), (&[1, 1, 1, 1], 1)]);
        let mut queries = BinaryCodeSet::new(4);
        queries.push(&code_from_bits(&[0, 0, 0, 0]), 0).unwrap();
        let (curve, excluded) = pr_curve(&queries, &db).unwrap();
        assert_eq!(excluded, 0);
        assert_eq!(curve.len(), 101);
        assert!(curve.iter().all(|&(_, p)| p == 1.0));

        // relevance [1,0,1]: interpolated precision at recall 1.0 is 2/3
        let db = set_of(4, &[(&[0, 0, 0, 0], 0), (&[1, 0, 0, 0], 1), (&[1, 1, 0, 0], 0)]);
        let (curve, _) = pr_curve(&queries, &db).unwrap();
        let (_, p_last) = curve[100];
        assert!((p_last - 2.0 / 3.0).abs() < 1e-12);
        // nonincreasing after interpolation
        for w in curve.windows(2) {
            assert!(w[0].1 >= w[1].1 - 1e-12);
        }
    }
}
