//! Ranking metrics over graded multi-label relevance (`r = shared labels`),
//! label-probability AUC, and the evaluation report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hashcode::{shared_labels, BitCode, CodeBundle};
use crate::index::{build_index, rank_semantic, DEFAULT_THRESHOLD};
use crate::synthdata::LabelVector;

/// Relevance of a ranked list plus what the whole database holds for the
/// same query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRelevance {
    /// `r[j]` for the item at rank `j + 1`.
    pub r: Vec<u32>,
    /// Database relevance multiset, sorted descending; defines the ideal DCG.
    pub ideal: Vec<u32>,
    /// Items in the database with `r >= 1`.
    pub n_pos: usize,
}

impl RankedRelevance {
    /// For a ranking of the whole database the ideal multiset is the ranking's own.
    pub fn full(r: Vec<u32>) -> Self {
        let mut ideal = r.clone();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let n_pos = r.iter().filter(|&&v| v > 0).count();
        Self { r, ideal, n_pos }
    }
}

fn check_depth(rel: &RankedRelevance, m: usize) -> Result<()> {
    if m == 0 || m > rel.r.len() {
        return Err(Error::Invalid(format!("depth {m} outside 1..={}", rel.r.len())));
    }
    Ok(())
}

fn dcg(r: &[u32]) -> f64 {
    r.iter()
        .enumerate()
        .map(|(j, &v)| (2f64.powi(v as i32) - 1.0) / ((j + 2) as f64).log2())
        .sum()
}

/// `DCG@m / Z_m`; zero when the ideal DCG is zero.
pub fn ndcg_at(rel: &RankedRelevance, m: usize) -> Result<f64> {
    check_depth(rel, m)?;
    let z = dcg(&rel.ideal[..m.min(rel.ideal.len())]);
    if z == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(&rel.r[..m]) / z)
}

/// Mean relevance of the top `m`.
pub fn acg_at(rel: &RankedRelevance, m: usize) -> Result<f64> {
    check_depth(rel, m)?;
    Ok(rel.r[..m].iter().map(|&v| v as f64).sum::<f64>() / m as f64)
}

fn require_positive(rel: &RankedRelevance) -> Result<()> {
    if rel.n_pos == 0 {
        return Err(Error::Invalid("query has no relevant items".into()));
    }
    Ok(())
}

/// Average precision over the full ranking, normalized by `n_pos`.
pub fn map(rel: &RankedRelevance) -> Result<f64> {
    require_positive(rel)?;
    let mut hits = 0usize;
    let mut total = 0.0;
    for (j, &v) in rel.r.iter().enumerate() {
        if v > 0 {
            hits += 1;
            total += hits as f64 / (j + 1) as f64;
        }
    }
    Ok(total / rel.n_pos as f64)
}

/// Like [`map`] with `ACG@j` in place of precision.
pub fn weighted_map(rel: &RankedRelevance) -> Result<f64> {
    require_positive(rel)?;
    let mut prefix = 0.0;
    let mut total = 0.0;
    for (j, &v) in rel.r.iter().enumerate() {
        prefix += v as f64;
        if v > 0 {
            total += prefix / (j + 1) as f64;
        }
    }
    Ok(total / rel.n_pos as f64)
}

/// Mean of the defined values; queries yielding `None` are counted separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Averaged {
    pub value: f64,
    pub included: usize,
    pub excluded: usize,
}

pub fn average(values: &[Option<f64>]) -> Averaged {
    let included: Vec<f64> = values.iter().flatten().copied().collect();
    let value = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Averaged {
        value,
        included: included.len(),
        excluded: values.len() - included.len(),
    }
}

/// Area under the ROC curve of `scores` for the binary `positive` labels,
/// ties counted half. `None` if either class is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Mann-Whitney with midranks.
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let midrank = (k + end + 1) as f64 / 2.0;
        rank_sum += midrank * order[k..end].iter().filter(|&&i| positive[i]).count() as f64;
        k = end;
    }
    Some((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Per-query results of ranking the database by one code per image.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub map: Option<f64>,
    pub weighted_map: Option<f64>,
    pub ndcg: f64,
    pub acg: f64,
}

/// Ranks the whole database by `query_code` and scores the ranking against the
/// query's shared-label relevance.
fn score_query<'a>(
    query_code: &BitCode,
    db: &'a [(u64, &'a BitCode)],
    labels: &HashMap<u64, &LabelVector>,
    depth: usize,
    relevant: impl Fn(&LabelVector) -> u32,
) -> Result<QueryScores> {
    let ranking = rank_semantic(query_code, db, db.len())?;
    let r: Vec<u32> = ranking.iter().map(|(id, _)| relevant(labels[id])).collect();
    let rel = RankedRelevance::full(r);
    let m = depth.min(rel.r.len());
    Ok(QueryScores {
        map: map(&rel).ok(),
        weighted_map: weighted_map(&rel).ok(),
        ndcg: ndcg_at(&rel, m)?,
        acg: acg_at(&rel, m)?,
    })
}

/// One report line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub metric: String,
    pub bits: usize,
    pub value: f64,
    pub num_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub lines: Vec<ReportLine>,
}

impl Report {
    fn push(&mut self, metric: impl Into<String>, bits: usize, value: f64, num_queries: usize) {
        self.lines.push(ReportLine {
            metric: metric.into(),
            bits,
            value,
            num_queries,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.lines.iter().find(|l| l.metric == metric).map(|l| l.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric, bits, value, num_queries\n");
        for l in &self.lines {
            writeln!(out, "{}, {}, {:.6}, {}", l.metric, l.bits, l.value, l.num_queries).expect("write to string");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Depth for NDCG and ACG.
    pub depth: usize,
    /// Probability threshold of the grouped index used for per-category MAP.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            depth: 100,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// An image's codes with its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub codes: &'a CodeBundle,
    pub labels: &'a LabelVector,
}

/// Semantic ranking metrics (when semantic codes exist), per-category MAP of
/// the category codes, and per-label AUC of the image probabilities.
///
/// For category `j` each query holding `j` ranks table `j` of the grouped
/// index by its `j`-th code; an item is relevant iff it also holds `j`, and
/// relevant images kept out of the table by the threshold count as misses.
pub fn evaluate(queries: &[Labeled], database: &[Labeled], cfg: EvalConfig, exec: Execution) -> Result<Report> {
    if queries.is_empty() || database.is_empty() {
        return Err(Error::Invalid("evaluation needs queries and a database".into()));
    }
    let c = database[0].labels.len();
    let b = database[0].codes.bits();
    let q = database[0].codes.semantic_bits();
    for item in queries.iter().chain(database) {
        if item.labels.len() != c || item.codes.bits() != b || item.codes.semantic_bits() != q {
            return Err(Error::shape("evaluate", format!("image {} differs in shape", item.codes.id)));
        }
    }
    let labels: HashMap<u64, &LabelVector> = database.iter().map(|d| (d.codes.id, d.labels)).collect();
    let mut report = Report::default();

    if q > 0 {
        let db: Vec<(u64, &BitCode)> = database
            .iter()
            .map(|d| (d.codes.id, d.codes.semantic.as_ref().expect("semantic code")))
            .collect();
        let scores = exec
            .map(queries, |qi| {
                score_query(qi.codes.semantic.as_ref().expect("semantic code"), &db, &labels, cfg.depth, |y| {
                    shared_labels(qi.labels, y).expect("same length") as u32
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let maps = average(&scores.iter().map(|s| s.map).collect::<Vec<_>>());
        let wmaps = average(&scores.iter().map(|s| s.weighted_map).collect::<Vec<_>>());
        let n = scores.len();
        let ndcg = scores.iter().map(|s| s.ndcg).sum::<f64>() / n as f64;
        let acg = scores.iter().map(|s| s.acg).sum::<f64>() / n as f64;
        report.push("map", q, maps.value, maps.included);
        report.push("weighted_map", q, wmaps.value, wmaps.included);
        report.push(format!("ndcg@{}", cfg.depth), q, ndcg, n);
        report.push(format!("acg@{}", cfg.depth), q, acg, n);
        report.push("excluded_queries", q, maps.excluded as f64, n);
    }

    let db_bundles: Vec<CodeBundle> = database.iter().map(|d| d.codes.clone()).collect();
    let idx = build_index(&db_bundles, cfg.threshold)?;
    let mut cat_maps = Vec::with_capacity(c);
    for (j, table) in idx.tables.iter().enumerate() {
        let n_pos = database.iter().filter(|d| d.labels.has(j)).count();
        let holders: Vec<&Labeled> = queries.iter().filter(|qi| qi.labels.has(j)).collect();
        let maps = exec
            .map(&holders, |qi| {
                let ranking = table.rank(&qi.codes.category_codes[j], table.len())?;
                let r = ranking.iter().map(|(id, _)| labels[id].has(j) as u32).collect();
                Ok(map(&RankedRelevance {
                    r,
                    ideal: vec![1; n_pos],
                    n_pos,
                })
                .ok())
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let avg = average(&maps);
        report.push(format!("map_category_{j}"), b, avg.value, avg.included);
        cat_maps.push(avg.value);
    }
    report.push("map_category_mean", b, cat_maps.iter().sum::<f64>() / c as f64, queries.len());

    let everything: Vec<&Labeled> = queries.iter().chain(database).collect();
    let mut aucs = Vec::with_capacity(c);
    for j in 0..c {
        let scores: Vec<f64> = everything.iter().map(|x| x.codes.probs[j]).collect();
        let pos: Vec<bool> = everything.iter().map(|x| x.labels.has(j)).collect();
        if let Some(a) = auc(&scores, &pos) {
            report.push(format!("auc_category_{j}"), b, a, everything.len());
            aucs.push(a);
        }
    }
    if !aucs.is_empty() {
        report.push("auc_mean", b, aucs.iter().sum::<f64>() / aucs.len() as f64, everything.len());
    }
    Ok(report)
}

/// Evaluates a random-code control: every image gets independent uniform
/// semantic bits drawn from `seed`, everything else unchanged.
pub fn random_code_control(queries: &[Labeled], database: &[Labeled], bits: usize, seed: u64, cfg: EvalConfig) -> Result<f64> {
    use rand::RngCore;
    let mut rng = crate::numerics::SeededRng::new(seed);
    let mut draw = || {
        let words = (0..bits.div_ceil(64)).map(|_| rng.next_u64()).collect();
        BitCode::from_words(bits, words).expect("word count")
    };
    let q_codes: Vec<BitCode> = queries.iter().map(|_| draw()).collect();
    let d_codes: Vec<BitCode> = database.iter().map(|_| draw()).collect();
    let labels: HashMap<u64, &LabelVector> = database.iter().map(|d| (d.codes.id, d.labels)).collect();
    let db: Vec<(u64, &BitCode)> = database.iter().zip(&d_codes).map(|(d, c)| (d.codes.id, c)).collect();
    let maps = queries
        .iter()
        .zip(&q_codes)
        .map(|(qi, code)| {
            score_query(code, &db, &labels, cfg.depth, |y| shared_labels(qi.labels, y).expect("same length") as u32)
                .map(|s| s.map)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average(&maps).value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_ideal_and_zero() {
        let rel = RankedRelevance::full(vec![3, 2, 2, 1, 0]);
        for m in 1..=5 {
            assert!((ndcg_at(&rel, m).unwrap() - 1.0).abs() < 1e-15);
        }
        let zero = RankedRelevance::full(vec![0; 4]);
        assert_eq!(ndcg_at(&zero, 3).unwrap(), 0.0);
        assert!(ndcg_at(&zero, 0).is_err());
        assert!(ndcg_at(&zero, 5).is_err());
    }

    #[test]
    fn ndcg_small_hand_value() {
        let rel = RankedRelevance::full(vec![2, 0, 1]);
        let dcg = 3.0 / 2f64.log2() + 0.0 + 1.0 / 4f64.log2();
        let ideal = 3.0 / 2f64.log2() + 1.0 / 3f64.log2();
        assert!((ndcg_at(&rel, 3).unwrap() - dcg / ideal).abs() < 1e-15);
    }

    #[test]
    fn acg_cases() {
        assert_eq!(acg_at(&RankedRelevance::full(vec![2; 6]), 4).unwrap(), 2.0);
        assert_eq!(acg_at(&RankedRelevance::full(vec![3, 1]), 2).unwrap(), 2.0);
    }

    #[test]
    fn map_cases() {
        assert_eq!(map(&RankedRelevance::full(vec![1, 2, 1])).unwrap(), 1.0);
        assert_eq!(map(&RankedRelevance::full(vec![0, 1])).unwrap(), 0.5);
        assert!(map(&RankedRelevance::full(vec![0, 0])).is_err());
    }

    #[test]
    fn weighted_map_cases() {
        assert_eq!(weighted_map(&RankedRelevance::full(vec![2])).unwrap(), 2.0);
        let rel = RankedRelevance {
            r: vec![0, 0],
            ideal: vec![1, 0, 0],
            n_pos: 1,
        };
        assert_eq!(weighted_map(&rel).unwrap(), 0.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn average_skips_undefined() {
        let a = average(&[Some(1.0), None, Some(0.5)]);
        assert_eq!(a.value, 0.75);
        assert_eq!((a.included, a.excluded), (2, 1));
    }
}
