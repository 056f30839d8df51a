//! Bit-packed codes, Hamming ranking and retrieval metrics.
//!
//! Codes are stored as little-endian `u64` words, `ceil(K / 64)` per item;
//! bit `j` of an item is set iff its `j`-th code value is `+1`. Padding bits
//! are always zero, so XOR + popcount over whole words is the distance.
//!
//! Relevance between a query and a database item is "shares at least one
//! label". Queries with no relevant database item are skipped by MAP and
//! the PR curve and counted in the report.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::codec::{self, malformed, read_err};
use crate::data::LabelMatrix;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::networks::Direction;

const CODE_MAGIC: &[u8; 8] = b"UCHCODE1";

/// Borrowed view of one packed code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodeRef<'a> {
    pub bits: usize,
    pub words: &'a [u64],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMatrix {
    n: usize,
    bits: usize,
    words: Vec<u64>,
}

pub fn words_per_code(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl CodeMatrix {
    pub fn empty(bits: usize) -> Self {
        Self {
            n: 0,
            bits,
            words: Vec::new(),
        }
    }

    /// Packs row-major `±1` values (`n * bits` of them).
    pub fn from_signs(n: usize, bits: usize, signs: &[i8]) -> Result<Self> {
        if bits == 0 || signs.len() != n * bits {
            return Err(Error::contract(format!(
                "{} sign values for {n} codes of {bits} bits",
                signs.len()
            )));
        }
        if let Some(bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::contract(format!("code value {bad} is not ±1")));
        }
        let wpc = words_per_code(bits);
        let mut words = vec![0u64; n * wpc];
        for (i, code) in signs.chunks(bits).enumerate() {
            for (j, &s) in code.iter().enumerate() {
                if s == 1 {
                    words[i * wpc + j / 64] |= 1u64 << (j % 64);
                }
            }
        }
        Ok(Self { n, bits, words })
    }

    /// Binarises a real matrix: entries `>= 0` become `+1`, others `-1`.
    pub fn from_real(values: &Matrix) -> Result<Self> {
        let signs: Vec<i8> = values
            .as_slice()
            .iter()
            .map(|&v| if v >= 0.0 { 1 } else { -1 })
            .collect();
        Self::from_signs(values.rows(), values.cols(), &signs)
    }

    pub fn from_words(n: usize, bits: usize, words: Vec<u64>) -> Result<Self> {
        let wpc = words_per_code(bits);
        if bits == 0 || words.len() != n * wpc {
            return Err(Error::contract(format!(
                "{} words for {n} codes of {bits} bits",
                words.len()
            )));
        }
        let m = Self { n, bits, words };
        if m.has_padding_bits() {
            return Err(Error::contract("padding bits beyond K must be zero"));
        }
        Ok(m)
    }

    fn has_padding_bits(&self) -> bool {
        let rem = self.bits % 64;
        if rem == 0 {
            return false;
        }
        let mask = !0u64 << rem;
        let wpc = words_per_code(self.bits);
        (0..self.n).any(|i| self.words[i * wpc + wpc - 1] & mask != 0)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> CodeRef<'_> {
        let wpc = words_per_code(self.bits);
        CodeRef {
            bits: self.bits,
            words: &self.words[i * wpc..(i + 1) * wpc],
        }
    }

    /// Row-major `±1` values.
    pub fn unpack(&self) -> Vec<i8> {
        let wpc = words_per_code(self.bits);
        let mut out = Vec::with_capacity(self.n * self.bits);
        for i in 0..self.n {
            for j in 0..self.bits {
                let set = self.words[i * wpc + j / 64] >> (j % 64) & 1 == 1;
                out.push(if set { 1 } else { -1 });
            }
        }
        out
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let wpc = words_per_code(self.bits);
        let mut words = Vec::with_capacity(indices.len() * wpc);
        for &i in indices {
            words.extend_from_slice(self.code(i).words);
        }
        Self {
            n: indices.len(),
            bits: self.bits,
            words,
        }
        .debug_checked()
    }

    fn debug_checked(self) -> Self {
        debug_assert!(!self.has_padding_bits());
        self
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::Io {
            path: Default::default(),
            source: e,
        };
        w.write_all(CODE_MAGIC).map_err(io)?;
        codec::write_u32(w, codec::count(self.n, "code count")?).map_err(io)?;
        codec::write_u32(w, codec::count(self.bits, "code length")?).map_err(io)?;
        for &word in &self.words {
            codec::write_u64(w, word).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        const KIND: &str = "code";
        let rd = read_err(KIND);
        if !codec::expect_magic(r, CODE_MAGIC).map_err(&rd)? {
            return Err(malformed(KIND, "bad magic"));
        }
        let n = codec::read_u32(r).map_err(&rd)? as usize;
        let bits = codec::read_u32(r).map_err(&rd)? as usize;
        if bits == 0 {
            return Err(malformed(KIND, "zero code length"));
        }
        let total = n * words_per_code(bits);
        let mut words = Vec::with_capacity(total.min(1 << 24));
        for _ in 0..total {
            words.push(codec::read_u64(r).map_err(&rd)?);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(&rd)? != 0 {
            return Err(malformed(KIND, "trailing bytes"));
        }
        Self::from_words(n, bits, words).map_err(|e| malformed(KIND, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = codec::create(path)?;
        self.write_to(&mut w)
            .and_then(|_| w.flush().map_err(codec::io_err(path)))
            .map_err(|e| codec::at_path(e, "code", path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = codec::open(path)?;
        Self::read_from(&mut r).map_err(|e| codec::at_path(e, "code", path))
    }
}

/// Number of differing bits.
pub fn hamming_distance(a: CodeRef<'_>, b: CodeRef<'_>) -> Result<u32> {
    if a.bits != b.bits || a.words.len() != b.words.len() {
        return Err(Error::contract(format!(
            "hamming distance between {}-bit and {}-bit codes",
            a.bits, b.bits
        )));
    }
    Ok(a.words
        .iter()
        .zip(b.words)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum())
}

fn check_bits(queries: &CodeMatrix, database: &CodeMatrix) -> Result<()> {
    if queries.bits != database.bits {
        return Err(Error::contract(format!(
            "query codes have {} bits, database codes {}",
            queries.bits, database.bits
        )));
    }
    Ok(())
}

fn distances(query: CodeRef<'_>, database: &CodeMatrix) -> Vec<u32> {
    (0..database.len())
        .map(|j| {
            query
                .words
                .iter()
                .zip(database.code(j).words)
                .map(|(x, y)| (x ^ y).count_ones())
                .sum()
        })
        .collect()
}

/// Counting sort on distance; equal distances keep ascending index order.
fn order_by_distance(dist: &[u32], bits: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bits + 2];
    for &d in dist {
        counts[d as usize + 1] += 1;
    }
    for r in 1..counts.len() {
        counts[r] += counts[r - 1];
    }
    let mut out = vec![0usize; dist.len()];
    for (j, &d) in dist.iter().enumerate() {
        let slot = &mut counts[d as usize];
        out[*slot] = j;
        *slot += 1;
    }
    out
}

/// Database indices by ascending Hamming distance, ties by ascending index.
pub fn rank_by_hamming(query: CodeRef<'_>, database: &CodeMatrix) -> Result<Vec<usize>> {
    if database.is_empty() {
        return Ok(Vec::new());
    }
    if query.bits != database.bits || query.words.len() != words_per_code(database.bits) {
        return Err(Error::contract(format!(
            "ranking a {}-bit query against {}-bit codes",
            query.bits, database.bits
        )));
    }
    Ok(order_by_distance(
        &distances(query, database),
        database.bits,
    ))
}

/// Query codes plus labels for both sides of an evaluation.
#[derive(Clone, Copy)]
pub struct EvalSet<'a> {
    pub queries: &'a CodeMatrix,
    pub database: &'a CodeMatrix,
    pub query_labels: &'a LabelMatrix,
    pub database_labels: &'a LabelMatrix,
}

impl<'a> EvalSet<'a> {
    pub fn new(
        queries: &'a CodeMatrix,
        database: &'a CodeMatrix,
        query_labels: &'a LabelMatrix,
        database_labels: &'a LabelMatrix,
    ) -> Result<Self> {
        check_bits(queries, database)?;
        if query_labels.len() != queries.len() || database_labels.len() != database.len() {
            return Err(Error::contract(format!(
                "labels for {}/{} items but {}/{} codes",
                query_labels.len(),
                database_labels.len(),
                queries.len(),
                database.len()
            )));
        }
        if query_labels.classes() != database_labels.classes() {
            return Err(Error::contract("query and database label widths differ"));
        }
        Ok(Self {
            queries,
            database,
            query_labels,
            database_labels,
        })
    }

    fn relevance(&self, q: usize) -> Vec<bool> {
        (0..self.database.len())
            .map(|j| self.query_labels.shares_label(q, self.database_labels, j))
            .collect()
    }
}

/// Per-query intermediate results, computed once and shared by all metrics.
struct QueryEval {
    relevant_total: usize,
    average_precision: f64,
    /// Cumulative retrieved / relevant-retrieved counts at radius 0..=K.
    within: Vec<(usize, usize)>,
    /// Relevant count among the first `N` ranked items, per requested `N`.
    hits_at: Vec<usize>,
}

fn evaluate_query(set: &EvalSet<'_>, q: usize, ns: &[usize]) -> QueryEval {
    let bits = set.database.bits();
    let dist = distances(set.queries.code(q), set.database);
    let relevant = set.relevance(q);
    let order = order_by_distance(&dist, bits);

    let relevant_total = relevant.iter().filter(|&&r| r).count();
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut hits_prefix = Vec::with_capacity(order.len() + 1);
    hits_prefix.push(0);
    for (rank, &j) in order.iter().enumerate() {
        if relevant[j] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
        hits_prefix.push(hits);
    }
    let average_precision = if relevant_total > 0 {
        ap / relevant_total as f64
    } else {
        0.0
    };

    let mut per_radius = vec![(0usize, 0usize); bits + 1];
    for (j, &d) in dist.iter().enumerate() {
        per_radius[d as usize].0 += 1;
        per_radius[d as usize].1 += relevant[j] as usize;
    }
    let mut acc = (0, 0);
    let within = per_radius
        .into_iter()
        .map(|(t, r)| {
            acc = (acc.0 + t, acc.1 + r);
            acc
        })
        .collect();

    QueryEval {
        relevant_total,
        average_precision,
        within,
        hits_at: ns.iter().map(|&n| hits_prefix[n]).collect(),
    }
}

fn evaluate_all(set: &EvalSet<'_>, ns: &[usize]) -> Vec<QueryEval> {
    (0..set.queries.len())
        .into_par_iter()
        .map(|q| evaluate_query(set, q, ns))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapSummary {
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn summarize_map(evals: &[QueryEval]) -> Result<MapSummary> {
    let mut sum = 0.0;
    let mut evaluated = 0;
    for e in evals.iter().filter(|e| e.relevant_total > 0) {
        sum += e.average_precision;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::contract("no query has a relevant database item"));
    }
    Ok(MapSummary {
        map: sum / evaluated as f64,
        evaluated,
        skipped: evals.len() - evaluated,
    })
}

/// Full-ranking MAP over queries with at least one relevant item.
pub fn mean_average_precision(set: &EvalSet<'_>) -> Result<MapSummary> {
    summarize_map(&evaluate_all(set, &[]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub radius: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// (query, radius) pairs that retrieved nothing and so scored
    /// precision 1, recall 0.
    pub empty_retrievals: usize,
}

fn summarize_pr(evals: &[QueryEval], bits: usize) -> Result<PrCurve> {
    let valid: Vec<&QueryEval> = evals.iter().filter(|e| e.relevant_total > 0).collect();
    if valid.is_empty() {
        return Err(Error::contract("no query has a relevant database item"));
    }
    let mut empty_retrievals = 0;
    let mut points = Vec::with_capacity(bits + 1);
    for radius in 0..=bits {
        let (mut p, mut r) = (0.0, 0.0);
        for e in &valid {
            let (retrieved, hits) = e.within[radius];
            if retrieved == 0 {
                empty_retrievals += 1;
                p += 1.0;
            } else {
                p += hits as f64 / retrieved as f64;
            }
            r += hits as f64 / e.relevant_total as f64;
        }
        points.push(PrPoint {
            radius,
            precision: p / valid.len() as f64,
            recall: r / valid.len() as f64,
        });
    }
    Ok(PrCurve {
        points,
        empty_retrievals,
    })
}

/// Precision and recall of `{d : dist <= r}` for `r = 0..=K`, averaged over
/// queries with at least one relevant item.
pub fn pr_curve(set: &EvalSet<'_>) -> Result<PrCurve> {
    summarize_pr(&evaluate_all(set, &[]), set.database.bits())
}

fn check_ns(ns: &[usize], db: usize) -> Result<()> {
    if let Some(&n) = ns.iter().find(|&&n| n == 0 || n > db) {
        return Err(Error::contract(format!(
            "precision cutoff {n} outside 1..={db} (database size)"
        )));
    }
    Ok(())
}

fn summarize_precision_at(evals: &[QueryEval], ns: &[usize]) -> Vec<(usize, f64)> {
    ns.iter()
        .enumerate()
        .map(|(k, &n)| {
            let total: f64 = evals.iter().map(|e| e.hits_at[k] as f64 / n as f64).sum();
            (n, total / evals.len().max(1) as f64)
        })
        .collect()
}

/// Mean fraction of relevant items among the top `N`, over all queries.
pub fn precision_at(set: &EvalSet<'_>, ns: &[usize]) -> Result<Vec<(usize, f64)>> {
    check_ns(ns, set.database.len())?;
    Ok(summarize_precision_at(&evaluate_all(set, ns), ns))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub bits: usize,
    pub queries: usize,
    pub map: MapSummary,
    pub pr: PrCurve,
    pub precision_at: Vec<(usize, f64)>,
}

pub fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::ImageToText => "image_to_text",
        Direction::TextToImage => "text_to_image",
    }
}

/// All three metrics from one pass over the queries.
pub fn evaluate(set: &EvalSet<'_>, direction: Direction, ns: &[usize]) -> Result<RetrievalReport> {
    check_ns(ns, set.database.len())?;
    let evals = evaluate_all(set, ns);
    Ok(RetrievalReport {
        direction,
        bits: set.database.bits(),
        queries: set.queries.len(),
        map: summarize_map(&evals)?,
        pr: summarize_pr(&evals, set.database.bits())?,
        precision_at: summarize_precision_at(&evals, ns),
    })
}

impl fmt::Display for RetrievalReport {
    /// CSV with one block per metric; lines starting with `#` are comments.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# uch retrieval report")?;
        writeln!(f, "# direction: {}", direction_name(self.direction))?;
        writeln!(f, "# code_bits: {}", self.bits)?;
        writeln!(
            f,
            "# queries: {} evaluated: {} skipped_no_relevant: {}",
            self.queries, self.map.evaluated, self.map.skipped
        )?;
        writeln!(
            f,
            "# empty_retrievals: {} (query-radius pairs retrieving nothing; scored precision 1, recall 0)",
            self.pr.empty_retrievals
        )?;
        writeln!(f, "# block: map")?;
        writeln!(f, "map")?;
        writeln!(f, "{}", self.map.map)?;
        writeln!(f, "# block: pr_curve")?;
        writeln!(f, "radius,precision,recall")?;
        for p in &self.pr.points {
            writeln!(f, "{},{},{}", p.radius, p.precision, p.recall)?;
        }
        writeln!(f, "# block: precision_at")?;
        writeln!(f, "n,precision")?;
        for (n, p) in &self.precision_at {
            writeln!(f, "{n},{p}")?;
        }
        Ok(())
    }
}
