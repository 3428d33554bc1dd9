//! Category-aware retrieval: one Hamming table per category holding the
//! codes of images whose label probability clears the threshold, exhaustive
//! popcount ranking, single-code semantic ranking, and saliency maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hashcode::{BitCode, CodeBundle};
use crate::numerics::Matrix;
use crate::synthdata::BoxRect;

pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_TOP_K: usize = 10;

/// Number of differing bits.
pub fn hamming_distance(a: &BitCode, b: &BitCode) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::shape("hamming_distance", format!("{} bits vs {} bits", a.len(), b.len())));
    }
    Ok(hamming_words(a.words(), b.words()))
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// The one inclusion predicate used on both sides of retrieval.
#[inline]
pub fn passes_threshold(p: f64, threshold: f64) -> bool {
    p >= threshold
}

/// One category's table. Entries are sorted by `(code, id)` and stored as
/// flat arrays for scanning; `buckets` maps each distinct code to its run.
#[derive(Debug, Clone, PartialEq)]
pub struct HashTable {
    bits: usize,
    stride: usize,
    words: Vec<u64>,
    ids: Vec<u64>,
    probs: Vec<f64>,
    buckets: BTreeMap<Vec<u64>, (usize, usize)>,
}

impl HashTable {
    fn from_entries(bits: usize, mut entries: Vec<(BitCode, u64, f64)>) -> Self {
        entries.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let stride = bits.div_ceil(64);
        let mut table = Self {
            bits,
            stride,
            words: Vec::with_capacity(entries.len() * stride),
            ids: Vec::with_capacity(entries.len()),
            probs: Vec::with_capacity(entries.len()),
            buckets: BTreeMap::new(),
        };
        for (k, (code, id, p)) in entries.into_iter().enumerate() {
            table.words.extend_from_slice(code.words());
            table.ids.push(id);
            table.probs.push(p);
            table
                .buckets
                .entry(code.words().to_vec())
                .and_modify(|r| r.1 = k + 1)
                .or_insert((k, k + 1));
        }
        table
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn contains(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    /// `(code, id, probability)` in stored order.
    pub fn entries(&self) -> impl Iterator<Item = (BitCode, u64, f64)> + '_ {
        (0..self.len()).map(move |k| {
            let code = BitCode::from_words(self.bits, self.words[k * self.stride..(k + 1) * self.stride].to_vec())
                .expect("stored code width");
            (code, self.ids[k], self.probs[k])
        })
    }

    /// Ids stored under exactly `code`, ascending.
    pub fn exact(&self, code: &BitCode) -> &[u64] {
        match self.buckets.get(code.words()) {
            Some(&(lo, hi)) => &self.ids[lo..hi],
            None => &[],
        }
    }

    /// Every entry ranked by distance to `code`, ties by ascending id,
    /// truncated to `top_k`.
    pub fn rank(&self, code: &BitCode, top_k: usize) -> Result<Vec<(u64, u32)>> {
        if code.len() != self.bits {
            return Err(Error::shape("rank", format!("query has {} bits, table has {}", code.len(), self.bits)));
        }
        let q = code.words();
        let scored: Vec<(u32, u64)> = self
            .ids
            .iter()
            .enumerate()
            .map(|(k, &id)| (hamming_words(q, &self.words[k * self.stride..(k + 1) * self.stride]), id))
            .collect();
        Ok(top_k_sorted(scored, top_k))
    }
}

fn top_k_sorted(mut scored: Vec<(u32, u64)>, top_k: usize) -> Vec<(u64, u32)> {
    if top_k < scored.len() {
        if top_k == 0 {
            return Vec::new();
        }
        scored.select_nth_unstable(top_k - 1);
        scored.truncate(top_k);
    }
    scored.sort_unstable();
    scored.into_iter().map(|(d, id)| (id, d)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedIndex {
    pub threshold: f64,
    pub tables: Vec<HashTable>,
}

impl GroupedIndex {
    pub fn categories(&self) -> usize {
        self.tables.len()
    }

    pub fn bits(&self) -> usize {
        self.tables.first().map_or(0, HashTable::bits)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.tables.iter().map(HashTable::len).collect()
    }
}

/// Table `j` receives every image with `p_j >= threshold`.
pub fn build_index(bundles: &[CodeBundle], threshold: f64) -> Result<GroupedIndex> {
    if !threshold.is_finite() {
        return Err(Error::Invalid(format!("threshold {threshold} is not finite")));
    }
    let first = bundles
        .first()
        .ok_or_else(|| Error::Invalid("cannot index an empty code set".into()))?;
    let (c, b) = (first.categories(), first.bits());
    let mut seen = std::collections::HashSet::with_capacity(bundles.len());
    let mut entries: Vec<Vec<(BitCode, u64, f64)>> = vec![Vec::new(); c];
    for bundle in bundles {
        if bundle.categories() != c || bundle.probs.len() != c {
            return Err(Error::shape("build_index", format!("image {} has {} groups, expected {c}", bundle.id, bundle.categories())));
        }
        if bundle.category_codes.iter().any(|code| code.len() != b) {
            return Err(Error::shape("build_index", format!("image {} code width differs from {b}", bundle.id)));
        }
        if !seen.insert(bundle.id) {
            return Err(Error::Invalid(format!("duplicate image id {}", bundle.id)));
        }
        for (j, (code, &p)) in bundle.category_codes.iter().zip(&bundle.probs).enumerate() {
            if passes_threshold(p, threshold) {
                entries[j].push((code.clone(), bundle.id, p));
            }
        }
    }
    Ok(GroupedIndex {
        threshold,
        tables: entries.into_iter().map(|e| HashTable::from_entries(b, e)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryResult {
    /// `(category, ranked (id, distance))`, categories ascending.
    pub groups: Vec<(usize, Vec<(u64, u32)>)>,
}

impl QueryResult {
    pub fn retained(&self) -> Vec<usize> {
        self.groups.iter().map(|(j, _)| *j).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Drops categories whose query probability is below `threshold` and ranks
/// each remaining table by the query's code for that category.
pub fn query_category_aware(query: &CodeBundle, idx: &GroupedIndex, threshold: f64, top_k: usize) -> Result<QueryResult> {
    if query.categories() != idx.categories() || query.probs.len() != idx.categories() {
        return Err(Error::shape(
            "query_category_aware",
            format!("query has {} groups, index has {}", query.categories(), idx.categories()),
        ));
    }
    if query.bits() != idx.bits() {
        return Err(Error::shape(
            "query_category_aware",
            format!("query codes have {} bits, index has {}", query.bits(), idx.bits()),
        ));
    }
    let mut groups = Vec::new();
    for (j, table) in idx.tables.iter().enumerate() {
        if passes_threshold(query.probs[j], threshold) {
            groups.push((j, table.rank(&query.category_codes[j], top_k)?));
        }
    }
    Ok(QueryResult { groups })
}

/// Ranks `(id, code)` pairs by distance to `query`, ties by ascending id.
pub fn rank_semantic(query: &BitCode, db: &[(u64, &BitCode)], top_k: usize) -> Result<Vec<(u64, u32)>> {
    let scored = db
        .iter()
        .map(|&(id, code)| hamming_distance(query, code).map(|d| (d, id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k_sorted(scored, top_k))
}

/// Per-pixel sum of `P[i][j]` over proposals covering the pixel, divided by
/// the map's maximum. Row-major `height x width`.
pub fn saliency_map(width: usize, height: usize, proposals: &[BoxRect], probs: &Matrix, j: usize) -> Result<Vec<f64>> {
    if proposals.len() != probs.rows() {
        return Err(Error::shape(
            "saliency_map",
            format!("{} proposals but {} probability rows", proposals.len(), probs.rows()),
        ));
    }
    if j >= probs.cols() {
        return Err(Error::Invalid(format!("category {j} out of range for {} categories", probs.cols())));
    }
    let mut map = vec![0.0; width * height];
    for (i, b) in proposals.iter().enumerate() {
        let w = probs.get(i, j);
        for y in b.y1 as usize..(b.y2 as usize).min(height) {
            for v in &mut map[y * width + b.x1 as usize..y * width + (b.x2 as usize).min(width)] {
                *v += w;
            }
        }
    }
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut map {
            *v /= max;
        }
    }
    Ok(map)
}

/// Binary graymap, maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} values for {width}x{height}", values.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const INDEX_HEADER: &str = "iahash-index 1";

/// Text layout: a header with `c`, `b`, threshold and per-table counts, then
/// one `table j` line per category followed by its `hex id p` entries.
pub fn format_index(idx: &GroupedIndex) -> String {
    let mut out = format!(
        "{INDEX_HEADER}\ncategories {}\nbits {}\nthreshold {}\ncounts",
        idx.categories(),
        idx.bits(),
        idx.threshold
    );
    for n in idx.counts() {
        write!(out, " {n}").expect("write to string");
    }
    out.push('\n');
    for (j, table) in idx.tables.iter().enumerate() {
        writeln!(out, "table {j}").expect("write to string");
        for (code, id, p) in table.entries() {
            writeln!(out, "{}\t{id}\t{p}", code.to_hex()).expect("write to string");
        }
    }
    out
}

pub fn write_index(path: &Path, idx: &GroupedIndex) -> Result<()> {
    fs::write(path, format_index(idx)).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<GroupedIndex> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    parse_index(&lines, &name)
}

fn parse_index(lines: &[String], name: &str) -> Result<GroupedIndex> {
    let bad = |line: usize, msg: String| Error::format(name, line, msg);
    let field = |k: usize, key: &str| -> Result<&str> {
        lines
            .get(k)
            .and_then(|l| l.strip_prefix(key))
            .and_then(|l| l.strip_prefix(' '))
            .ok_or_else(|| bad(k + 1, format!("expected `{key}`")))
    };
    if lines.first().map(String::as_str) != Some(INDEX_HEADER) {
        return Err(bad(1, format!("expected `{INDEX_HEADER}`")));
    }
    let c: usize = field(1, "categories")?.parse().map_err(|e| bad(2, format!("categories: {e}")))?;
    let b: usize = field(2, "bits")?.parse().map_err(|e| bad(3, format!("bits: {e}")))?;
    let threshold: f64 = field(3, "threshold")?.parse().map_err(|e| bad(4, format!("threshold: {e}")))?;
    let counts: Vec<usize> = lines
        .get(4)
        .and_then(|l| l.strip_prefix("counts"))
        .ok_or_else(|| bad(5, "expected `counts`".into()))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|e| bad(5, format!("count `{s}`: {e}"))))
        .collect::<Result<_>>()?;
    if counts.len() != c {
        return Err(bad(5, format!("{} counts for {c} categories", counts.len())));
    }
    let mut k = 5;
    let mut tables = Vec::with_capacity(c);
    for (j, &n) in counts.iter().enumerate() {
        if lines.get(k).map(String::as_str) != Some(&format!("table {j}")) {
            return Err(bad(k + 1, format!("expected `table {j}`")));
        }
        k += 1;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.get(k).ok_or_else(|| bad(k + 1, "unexpected end of file".into()))?;
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad(k + 1, format!("expected 3 fields, found {}", parts.len())));
            }
            let code = BitCode::from_hex(parts[0], b).map_err(|e| bad(k + 1, e.to_string()))?;
            let id: u64 = parts[1].parse().map_err(|e| bad(k + 1, format!("id: {e}")))?;
            let p: f64 = parts[2].parse().map_err(|e| bad(k + 1, format!("probability: {e}")))?;
            entries.push((code, id, p));
            k += 1;
        }
        tables.push(HashTable::from_entries(b, entries));
    }
    if lines[k..].iter().any(|l| !l.is_empty()) {
        return Err(bad(k + 1, "trailing content".into()));
    }
    Ok(GroupedIndex { threshold, tables })
}
