//! TREC run/qrels handling, reranking, and the six ranking metrics.
//!
//! Semantics follow `trec_eval`: runs are re-sorted by score (descending,
//! ties by docid descending) before scoring, the ideal DCG uses every judged
//! document, and queries without relevant documents drop out of a metric's
//! mean instead of counting as zero.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::model::{tokenize_pair, ModelError};

#[derive(Debug, Error)]
pub enum IrError {
    #[error("{file} line {line}: {msg}")]
    Parse {
        file: &'static str,
        line: usize,
        msg: String,
    },
    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },
    #[error("scorer returned non-finite score for query `{qid}`, doc `{docid}`")]
    NonFiniteScore { qid: String, docid: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, IrError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub qid: String,
    pub docid: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

impl RunEntry {
    /// `qid Q0 docid rank score tag` with six decimals on the score.
    pub fn to_line(&self) -> String {
        format!(
            "{} Q0 {} {} {:.6} {}",
            self.qid, self.docid, self.rank, self.score, self.tag
        )
    }
}

fn parse_err(file: &'static str, line: usize, msg: impl Into<String>) -> IrError {
    IrError::Parse {
        file,
        line,
        msg: msg.into(),
    }
}

/// Parses whitespace-separated `qid Q0 docid rank score tag` lines. Blank
/// lines are skipped.
pub fn parse_run(text: &str) -> Result<Vec<RunEntry>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(parse_err("run", n, format!("expected 6 fields, found {}", f.len())));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| parse_err("run", n, format!("rank `{}` is not a non-negative integer", f[3])))?;
        if rank == 0 {
            return Err(parse_err("run", n, "rank must be ≥ 1"));
        }
        let score: f64 = f[4]
            .parse()
            .map_err(|_| parse_err("run", n, format!("score `{}` is not a number", f[4])))?;
        if !score.is_finite() {
            return Err(parse_err("run", n, format!("score `{}` is not finite", f[4])));
        }
        if !seen.insert((f[0].to_string(), f[2].to_string())) {
            return Err(parse_err(
                "run",
                n,
                format!("duplicate document `{}` for query `{}`", f[2], f[0]),
            ));
        }
        out.push(RunEntry {
            qid: f[0].into(),
            docid: f[2].into(),
            rank,
            score,
            tag: f[5].into(),
        });
    }
    Ok(out)
}

pub fn format_run(entries: &[RunEntry]) -> String {
    entries.iter().map(|e| e.to_line() + "\n").collect()
}

/// Judged documents of a single query.
pub type Judgments = BTreeMap<String, u32>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, Judgments>,
    /// Lines that overwrote an earlier judgment for the same pair.
    pub duplicates: usize,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment, returning the previous grade if any.
    pub fn insert(&mut self, qid: &str, docid: &str, grade: u32) -> Option<u32> {
        self.map
            .entry(qid.to_string())
            .or_default()
            .insert(docid.to_string(), grade)
    }

    pub fn query(&self, qid: &str) -> Option<&Judgments> {
        self.map.get(qid)
    }

    pub fn grade(&self, qid: &str, docid: &str) -> Option<u32> {
        self.map.get(qid)?.get(docid).copied()
    }

    pub fn queries(&self) -> impl Iterator<Item = (&String, &Judgments)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Parses `qid 0 docid rel` lines. A repeated (qid, docid) keeps the last
/// grade and logs a warning.
pub fn parse_qrels(text: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 4 {
            return Err(parse_err("qrels", n, format!("expected 4 fields, found {}", f.len())));
        }
        let grade: i64 = f[3]
            .parse()
            .map_err(|_| parse_err("qrels", n, format!("relevance `{}` is not an integer", f[3])))?;
        let grade = u32::try_from(grade).map_err(|_| {
            parse_err(
                "qrels",
                n,
                format!("relevance `{}` must be a non-negative integer", f[3]),
            )
        })?;
        if let Some(prev) = qrels.insert(f[0], f[2], grade) {
            log::warn!(
                "qrels line {n}: duplicate judgment for ({}, {}); {prev} replaced by {grade}",
                f[0],
                f[2]
            );
            qrels.duplicates += 1;
        }
    }
    Ok(qrels)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (qid, docs) in qrels.queries() {
        for (docid, grade) in docs {
            let _ = writeln!(out, "{qid} 0 {docid} {grade}");
        }
    }
    out
}

/// Scores a (query, passage) pair; higher is more relevant.
pub trait PairScorer {
    fn score_pair(&self, query: &str, passage: &str) -> Result<f64>;
}

impl PairScorer for Checkpoint {
    fn score_pair(&self, query: &str, passage: &str) -> Result<f64> {
        let seq = tokenize_pair(&self.vocab, query, passage, self.model.config().max_len);
        Ok(self.model.score(&seq)?)
    }
}

impl<F: Fn(&str, &str) -> f64> PairScorer for F {
    fn score_pair(&self, query: &str, passage: &str) -> Result<f64> {
        Ok(self(query, passage))
    }
}

/// Score descending, then docid descending.
fn trec_order(a: (&str, f64), b: (&str, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| b.0.cmp(a.0))
}

/// Groups a run by query, preserving first-appearance order of queries.
fn group_by_query(run: &[RunEntry]) -> Vec<(&str, Vec<&RunEntry>)> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(&str, Vec<&RunEntry>)> = Vec::new();
    for e in run {
        let slot = *index.entry(e.qid.as_str()).or_insert_with(|| {
            groups.push((e.qid.as_str(), Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(e);
    }
    groups
}

/// Docids of one query's entries in evaluation order.
fn ranked_docids<'a>(entries: &[&'a RunEntry]) -> Vec<&'a str> {
    let mut v: Vec<(&str, f64)> = entries.iter().map(|e| (e.docid.as_str(), e.score)).collect();
    v.sort_by(|a, b| trec_order(*a, *b));
    v.into_iter().map(|(d, _)| d).collect()
}

/// Rescores every candidate and rewrites ranks per query. All ids are
/// resolved before any scoring so the first unknown id (in input order) is
/// reported.
pub fn rerank(
    scorer: &dyn PairScorer,
    queries: &BTreeMap<String, String>,
    passages: &BTreeMap<String, String>,
    candidates: &[RunEntry],
    tag: &str,
) -> Result<Vec<RunEntry>> {
    for e in candidates {
        if !queries.contains_key(&e.qid) {
            return Err(IrError::UnknownId {
                kind: "query",
                id: e.qid.clone(),
            });
        }
        if !passages.contains_key(&e.docid) {
            return Err(IrError::UnknownId {
                kind: "passage",
                id: e.docid.clone(),
            });
        }
    }
    let mut out = Vec::with_capacity(candidates.len());
    for (qid, entries) in group_by_query(candidates) {
        let query = &queries[qid];
        let mut scored = Vec::with_capacity(entries.len());
        for e in entries {
            let s = scorer.score_pair(query, &passages[&e.docid])?;
            if !s.is_finite() {
                return Err(IrError::NonFiniteScore {
                    qid: qid.into(),
                    docid: e.docid.clone(),
                });
            }
            scored.push((e.docid.as_str(), s));
        }
        scored.sort_by(|a, b| trec_order(*a, *b));
        out.extend(scored.into_iter().enumerate().map(|(i, (docid, score))| RunEntry {
            qid: qid.into(),
            docid: docid.into(),
            rank: i + 1,
            score,
            tag: tag.into(),
        }));
    }
    Ok(out)
}

/// Parses `id<TAB>text` lines into a map.
pub fn parse_id_text(text: &str, file: &'static str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(file, i + 1, "expected `id<TAB>text`"))?;
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(parse_err(file, i + 1, format!("bad id `{id}`")));
        }
        if out.insert(id.to_string(), body.to_string()).is_some() {
            return Err(parse_err(file, i + 1, format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `rel`
    #[default]
    Linear,
    /// `2^rel − 1`
    Exponential,
}

impl Gain {
    fn apply(self, grade: u32) -> f64 {
        match self {
            Gain::Linear => f64::from(grade),
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// NDCG over the first `k` ranks, or `None` when no judged document has
/// positive gain.
pub fn ndcg_at_k(ranking: &[&str], judged: &Judgments, k: usize, gain: Gain) -> Option<f64> {
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.apply(g) / discount(i + 1))
        .sum();
    if idcg <= 0.0 {
        return None;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain.apply(judged.get(*d).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    Some(dcg / idcg)
}

fn relevant(judged: &Judgments, docid: &str, binarize_at: u32) -> bool {
    judged.get(docid).is_some_and(|&g| g >= binarize_at)
}

/// Number of judged documents with grade ≥ `binarize_at`.
pub fn num_relevant(judged: &Judgments, binarize_at: u32) -> usize {
    judged.values().filter(|&&g| g >= binarize_at).count()
}

fn hits_in_top(ranking: &[&str], judged: &Judgments, k: usize, binarize_at: u32) -> usize {
    ranking
        .iter()
        .take(k)
        .filter(|d| relevant(judged, d, binarize_at))
        .count()
}

pub fn average_precision(ranking: &[&str], judged: &Judgments, binarize_at: u32) -> Option<f64> {
    let r = num_relevant(judged, binarize_at);
    if r == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if relevant(judged, d, binarize_at) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / r as f64)
}

pub fn reciprocal_rank_at_k(ranking: &[&str], judged: &Judgments, k: usize, binarize_at: u32) -> Option<f64> {
    if num_relevant(judged, binarize_at) == 0 {
        return None;
    }
    Some(
        ranking
            .iter()
            .take(k)
            .position(|d| relevant(judged, d, binarize_at))
            .map_or(0.0, |p| 1.0 / (p + 1) as f64),
    )
}

/// Relevant in the top `k` divided by `k`, even when fewer than `k` were
/// retrieved.
pub fn precision_at_k(ranking: &[&str], judged: &Judgments, k: usize, binarize_at: u32) -> Option<f64> {
    if num_relevant(judged, binarize_at) == 0 {
        return None;
    }
    Some(hits_in_top(ranking, judged, k, binarize_at) as f64 / k as f64)
}

pub fn recall_at_k(ranking: &[&str], judged: &Judgments, k: usize, binarize_at: u32) -> Option<f64> {
    let r = num_relevant(judged, binarize_at);
    if r == 0 {
        return None;
    }
    Some(hits_in_top(ranking, judged, k, binarize_at) as f64 / r as f64)
}

pub fn r_precision(ranking: &[&str], judged: &Judgments, binarize_at: u32) -> Option<f64> {
    let r = num_relevant(judged, binarize_at);
    if r == 0 {
        return None;
    }
    Some(hits_in_top(ranking, judged, r, binarize_at) as f64 / r as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub k: usize,
    pub binarize_at: u32,
    pub gain: Gain,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 10,
            binarize_at: 1,
            gain: Gain::Linear,
        }
    }
}

pub const METRIC_NAMES: [&str; 6] = ["ndcg_cut_10", "map", "recip_rank_10", "recall_10", "Rprec", "P_10"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub ndcg: Option<f64>,
    pub map: Option<f64>,
    pub mrr: Option<f64>,
    pub recall: Option<f64>,
    pub r_prec: Option<f64>,
    pub precision: Option<f64>,
}

impl MetricValues {
    /// Values in [`METRIC_NAMES`] order.
    pub fn as_array(&self) -> [Option<f64>; 6] {
        [self.ndcg, self.map, self.mrr, self.recall, self.r_prec, self.precision]
    }

    fn from_array(a: [Option<f64>; 6]) -> Self {
        Self {
            ndcg: a[0],
            map: a[1],
            mrr: a[2],
            recall: a[3],
            r_prec: a[4],
            precision: a[5],
        }
    }
}

pub fn query_metrics(ranking: &[&str], judged: &Judgments, opts: &EvalOptions) -> MetricValues {
    let b = opts.binarize_at;
    MetricValues {
        ndcg: ndcg_at_k(ranking, judged, opts.k, opts.gain),
        map: average_precision(ranking, judged, b),
        mrr: reciprocal_rank_at_k(ranking, judged, opts.k, b),
        recall: recall_at_k(ranking, judged, opts.k, b),
        r_prec: r_precision(ranking, judged, b),
        precision: precision_at_k(ranking, judged, opts.k, b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub qid: String,
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: Vec<QueryReport>,
    /// Mean over the queries where each metric is defined.
    pub aggregate: MetricValues,
    /// Queries scored for at least one metric.
    pub num_queries: usize,
    /// Run queries absent from the qrels.
    pub skipped_queries: usize,
    pub options: EvalOptions,
}

/// Evaluates every run query that has judgments. Per-query rows are sorted by
/// qid.
pub fn evaluate(run: &[RunEntry], qrels: &Qrels, opts: &EvalOptions) -> MetricReport {
    let mut groups = group_by_query(run);
    groups.sort_by(|a, b| a.0.cmp(b.0));
    let mut per_query = Vec::new();
    let mut skipped = 0;
    for (qid, entries) in groups {
        let Some(judged) = qrels.query(qid) else {
            log::warn!("query `{qid}` has no judgments; skipped");
            skipped += 1;
            continue;
        };
        let ranking = ranked_docids(&entries);
        let metrics = query_metrics(&ranking, judged, opts);
        if metrics.as_array().iter().any(Option::is_some) {
            per_query.push(QueryReport {
                qid: qid.into(),
                metrics,
            });
        }
    }
    let mut agg = [None; 6];
    for (m, slot) in agg.iter_mut().enumerate() {
        let vals: Vec<f64> = per_query.iter().filter_map(|q| q.metrics.as_array()[m]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    MetricReport {
        num_queries: per_query.len(),
        per_query,
        aggregate: MetricValues::from_array(agg),
        skipped_queries: skipped,
        options: *opts,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl MetricReport {
    /// Aligned table: one row per query, then `all`.
    pub fn to_table(&self) -> String {
        let qw = self
            .per_query
            .iter()
            .map(|q| q.qid.len())
            .chain([3, "qid".len()])
            .max()
            .unwrap();
        let mut out = format!("{:<qw$}", "qid");
        for name in METRIC_NAMES {
            let _ = write!(out, "  {name:>13}");
        }
        out.push('\n');
        let rows = self
            .per_query
            .iter()
            .map(|q| (q.qid.as_str(), &q.metrics))
            .chain([("all", &self.aggregate)]);
        for (qid, m) in rows {
            let _ = write!(out, "{qid:<qw$}");
            for v in m.as_array() {
                let _ = write!(out, "  {:>13}", cell(v));
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "queries={} skipped={} binarize_at={} k={}",
            self.num_queries, self.skipped_queries, self.options.binarize_at, self.options.k
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn judged(pairs: &[(&str, u32)]) -> Judgments {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    fn close(a: Option<f64>, b: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() < 1e-12)
    }

    #[test]
    fn run_line_parsing() {
        let run = parse_run("q1 Q0 d7 1 9.5 bm25\n").unwrap();
        assert_eq!(
            run,
            vec![RunEntry {
                qid: "q1".into(),
                docid: "d7".into(),
                rank: 1,
                score: 9.5,
                tag: "bm25".into()
            }]
        );
        assert_eq!(run[0].to_line(), "q1 Q0 d7 1 9.500000 bm25");
        assert!(parse_run("").unwrap().is_empty());
        for (bad, line) in [
            ("q1 Q0 d7 1 9.5\n", 1),
            ("q1 Q0 d7 1 9.5 t\nq1 Q0 d8 x 9.5 t\n", 2),
            ("q1 Q0 d7 1 nan t\n", 1),
            ("q1 Q0 d7 1 abc t\n", 1),
            ("q1 Q0 d7 1 1 t\nq1 Q0 d7 2 1 t\n", 2),
        ] {
            match parse_run(bad) {
                Err(IrError::Parse { line: l, .. }) => assert_eq!(l, line, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn qrels_parsing_and_duplicates() {
        let q = parse_qrels("q1 0 d1 2\nq1 0 d2 0\nq1 0 d1 1\n\n").unwrap();
        assert_eq!(q.grade("q1", "d1"), Some(1));
        assert_eq!(q.duplicates, 1);
        assert_eq!(q.len(), 2);
        assert!(parse_qrels("").unwrap().is_empty());
        assert!(matches!(
            parse_qrels("q1 0 d1 -1\n"),
            Err(IrError::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_qrels("q1 0 d1\n"), Err(IrError::Parse { line: 1, .. })));
        assert!(matches!(
            parse_qrels("q 0 d 1\nq 0 d x\n"),
            Err(IrError::Parse { line: 2, .. })
        ));
        assert_eq!(parse_qrels(&format_qrels(&q)).unwrap().map, q.map);
    }

    #[test]
    fn ndcg_examples() {
        let j = judged(&[("a", 0), ("b", 3), ("c", 2)]);
        let v = ndcg_at_k(&["a", "b", "c"], &j, 10, Gain::Linear).unwrap();
        let dcg = 3.0 / 3f64.log2() + 2.0 / 2.0;
        let idcg = 3.0 + 2.0 / 3f64.log2();
        assert!((dcg - 2.8928).abs() < 1e-4 && (idcg - 4.2619).abs() < 1e-4);
        assert!((v - 0.6787).abs() < 1e-4);
        assert!(close(ndcg_at_k(&["b", "c", "a"], &j, 10, Gain::Linear), 1.0));
        assert_eq!(ndcg_at_k(&["a"], &judged(&[("a", 0)]), 10, Gain::Linear), None);
        // judged but unretrieved documents still count toward the ideal
        assert!(close(ndcg_at_k(&["c"], &j, 10, Gain::Linear), 2.0 / idcg));
        let e = ndcg_at_k(&["c", "b"], &j, 10, Gain::Exponential).unwrap();
        assert!((e - (3.0 + 7.0 / 3f64.log2()) / (7.0 + 3.0 / 3f64.log2())).abs() < 1e-12);
    }

    #[test]
    fn binary_metric_examples() {
        let j = judged(&[("x", 1), ("y", 1), ("n", 0)]);
        assert!(close(reciprocal_rank_at_k(&["n", "m", "x"], &j, 10, 1), 1.0 / 3.0));
        assert!(close(
            average_precision(&["x", "n", "y"], &j, 1),
            (1.0 + 2.0 / 3.0) / 2.0
        ));
        assert!(close(r_precision(&["x", "n", "y"], &j, 1), 0.5));
        assert!(close(recall_at_k(&["x"], &j, 10, 1), 0.5));
        assert!(close(precision_at_k(&["x"], &j, 10, 1), 0.1));
        let many = judged(
            &(0..8)
                .map(|i| (["a", "b", "c", "d", "e", "f", "g", "h"][i], 1))
                .collect::<Vec<_>>(),
        );
        let ranking = ["a", "b", "c", "d", "e", "f", "g", "h", "u", "v"];
        assert!(close(precision_at_k(&ranking, &many, 10, 1), 0.8));
        assert_eq!(reciprocal_rank_at_k(&["x"], &judged(&[("x", 1)]), 10, 2), None);
        assert!(close(reciprocal_rank_at_k(&["z"; 1], &j, 10, 1), 0.0));
    }

    fn entry(qid: &str, docid: &str, rank: usize, score: f64) -> RunEntry {
        RunEntry {
            qid: qid.into(),
            docid: docid.into(),
            rank,
            score,
            tag: "t".into(),
        }
    }

    #[test]
    fn evaluation_uses_scores_not_ranks() {
        let qrels = parse_qrels("q 0 a 1\nq 0 b 0\n").unwrap();
        // rank column says b first, scores say a first
        let run = vec![entry("q", "b", 1, 1.0), entry("q", "a", 2, 2.0)];
        let rep = evaluate(&run, &qrels, &EvalOptions::default());
        assert!(close(rep.aggregate.mrr, 1.0));
    }

    #[test]
    fn ties_break_by_docid_descending() {
        let qrels = parse_qrels("q 0 a 1\nq 0 b 0\n").unwrap();
        let run = vec![entry("q", "a", 1, 1.0), entry("q", "b", 2, 1.0)];
        let rep = evaluate(&run, &qrels, &EvalOptions::default());
        assert!(close(rep.aggregate.mrr, 0.5));
    }

    #[test]
    fn evaluate_edge_cases() {
        let qrels = parse_qrels("q1 0 a 2\nq1 0 b 1\nq2 0 c 0\n").unwrap();
        let empty = evaluate(&[], &qrels, &EvalOptions::default());
        assert_eq!(empty.num_queries, 0);
        assert_eq!(empty.aggregate, MetricValues::default());

        let run = vec![
            entry("q1", "a", 1, 2.0),
            entry("q1", "b", 2, 1.0),
            entry("q2", "c", 1, 1.0),
            entry("q9", "z", 1, 1.0),
        ];
        let rep = evaluate(&run, &qrels, &EvalOptions::default());
        assert_eq!(rep.skipped_queries, 1);
        assert_eq!(rep.num_queries, 1);
        assert!(close(rep.aggregate.ndcg, 1.0) && close(rep.aggregate.map, 1.0));
        assert!(rep.to_table().lines().any(|l| l.starts_with("all")));
    }

    #[test]
    fn three_query_means() {
        let qrels = parse_qrels("a 0 x 1\nb 0 y 1\nb 0 z 1\nc 0 w 1\n").unwrap();
        let run = parse_run(
            "a Q0 x 1 3 t\nb Q0 n 1 3 t\nb Q0 y 2 2 t\nb Q0 z 3 1 t\nc Q0 n 1 3 t\nc Q0 m 2 2 t\nc Q0 w 3 1 t\n",
        )
        .unwrap();
        let rep = evaluate(&run, &qrels, &EvalOptions::default());
        let mrr = (1.0 + 0.5 + 1.0 / 3.0) / 3.0;
        let map = (1.0 + (0.5 + 2.0 / 3.0) / 2.0 + 1.0 / 3.0) / 3.0;
        assert!(close(rep.aggregate.mrr, mrr));
        assert!(close(rep.aggregate.map, map));
        assert!(close(rep.aggregate.r_prec, (1.0 + 0.5 + 0.0) / 3.0));
    }

    #[test]
    fn rerank_contract() {
        let queries: BTreeMap<_, _> = [("q".to_string(), "query".to_string())].into();
        let passages: BTreeMap<_, _> = ["a", "b", "c"].map(|d| (d.to_string(), format!("text {d}"))).into();
        let cands = vec![
            entry("q", "a", 1, 0.0),
            entry("q", "b", 2, 0.0),
            entry("q", "c", 3, 0.0),
        ];
        let constant = |_: &str, _: &str| 0.5;
        let out = rerank(&constant, &queries, &passages, &cands, "m").unwrap();
        let ids: Vec<_> = out.iter().map(|e| (e.docid.as_str(), e.rank)).collect();
        assert_eq!(ids, vec![("c", 1), ("b", 2), ("a", 3)]);
        assert!(out.iter().all(|e| e.tag == "m"));

        let single = rerank(&constant, &queries, &passages, &cands[1..2], "m").unwrap();
        assert_eq!(single[0].rank, 1);

        let bad = vec![entry("q", "a", 1, 0.0), entry("q", "zz", 2, 0.0)];
        match rerank(&constant, &queries, &passages, &bad, "m") {
            Err(IrError::UnknownId { id, .. }) => assert_eq!(id, "zz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn id_text_parsing() {
        let m = parse_id_text("p1\thello world\np2\tbye\n", "passages").unwrap();
        assert_eq!(m["p1"], "hello world");
        assert!(matches!(
            parse_id_text("p1 no tab\n", "passages"),
            Err(IrError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_id_text("p\ta\np\tb\n", "passages"),
            Err(IrError::Parse { line: 2, .. })
        ));
    }

    fn case() -> impl Strategy<Value = (Vec<(String, f64)>, Judgments)> {
        (1usize..=8).prop_flat_map(|n| {
            (
                prop::collection::vec(0i32..6, n),
                prop::collection::vec(prop::option::of(0u32..4), n),
            )
                .prop_map(move |(scores, grades)| {
                    let docs: Vec<(String, f64)> = (0..n).map(|i| (format!("d{i}"), f64::from(scores[i]))).collect();
                    let j = grades
                        .iter()
                        .enumerate()
                        .filter_map(|(i, g)| g.map(|g| (format!("d{i}"), g)))
                        .collect();
                    (docs, j)
                })
        })
    }

    fn run_of(docs: &[(String, f64)]) -> Vec<RunEntry> {
        docs.iter()
            .enumerate()
            .map(|(i, (d, s))| entry("q", d, i + 1, *s))
            .collect()
    }

    proptest! {
        #[test]
        fn metrics_lie_in_unit_interval((docs, j) in case(), b in 1u32..3) {
            let ranking: Vec<&str> = docs.iter().map(|(d, _)| d.as_str()).collect();
            let m = query_metrics(&ranking, &j, &EvalOptions { binarize_at: b, ..EvalOptions::default() });
            for v in m.as_array().into_iter().flatten() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn monotone_score_transform_changes_nothing((docs, j) in case()) {
            let mut qrels = Qrels::new();
            for (d, g) in &j { qrels.insert("q", d, *g); }
            let run = run_of(&docs);
            let warped: Vec<RunEntry> = run.iter().map(|e| RunEntry { score: (e.score * 0.3).exp() + 7.0, ..e.clone() }).collect();
            let opts = EvalOptions::default();
            prop_assert_eq!(evaluate(&run, &qrels, &opts), evaluate(&warped, &qrels, &opts));
        }

        #[test]
        fn input_order_is_irrelevant((docs, j) in case()) {
            let mut qrels = Qrels::new();
            for (d, g) in &j { qrels.insert("q", d, *g); }
            let run = run_of(&docs);
            let mut rev = run.clone();
            rev.reverse();
            let opts = EvalOptions::default();
            prop_assert_eq!(evaluate(&run, &qrels, &opts), evaluate(&rev, &qrels, &opts));
        }

        #[test]
        fn rerank_is_a_permutation(n in 1usize..20, seed in any::<u64>()) {
            let queries: BTreeMap<_, _> = [("q".to_string(), "x".to_string())].into();
            let passages: BTreeMap<_, _> = (0..n).map(|i| (format!("d{i}"), format!("{}", (seed >> (i % 64)) & 7))).collect();
            let cands: Vec<RunEntry> = (0..n).map(|i| entry("q", &format!("d{i}"), i + 1, 0.0)).collect();
            let scorer = |_: &str, p: &str| p.parse::<f64>().unwrap();
            let out = rerank(&scorer, &queries, &passages, &cands, "m").unwrap();
            let mut a: Vec<_> = out.iter().map(|e| e.docid.clone()).collect();
            let mut b: Vec<_> = cands.iter().map(|e| e.docid.clone()).collect();
            a.sort(); b.sort();
            prop_assert_eq!(a, b);
            prop_assert!(out.iter().enumerate().all(|(i, e)| e.rank == i + 1));
            prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        }

        #[test]
        fn truncation_below_k((docs, j) in case(), tail in prop::collection::vec(0u32..4, 0..6)) {
            let mut ranking: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
            ranking.extend(docs.iter().map(|(d, _)| d.clone()));
            let mut judged = j.clone();
            for (i, g) in tail.iter().enumerate() { judged.insert(format!("t{i}"), *g); }
            let a: Vec<&str> = ranking.iter().map(String::as_str).collect();
            let mut b = a.clone();
            b[10..].reverse();
            prop_assert_eq!(ndcg_at_k(&a, &judged, 10, Gain::Linear), ndcg_at_k(&b, &judged, 10, Gain::Linear));
            prop_assert_eq!(precision_at_k(&a, &judged, 10, 1), precision_at_k(&b, &judged, 10, 1));
            prop_assert_eq!(recall_at_k(&a, &judged, 10, 1), recall_at_k(&b, &judged, 10, 1));
            prop_assert_eq!(reciprocal_rank_at_k(&a, &judged, 10, 1), reciprocal_rank_at_k(&b, &judged, 10, 1));
        }

        #[test]
        fn run_format_round_trips(scores in prop::collection::vec(-1_000_000i64..1_000_000, 1..20)) {
            let run: Vec<RunEntry> = scores.iter().enumerate()
                .map(|(i, s)| entry(&format!("q{}", i % 3), &format!("d{i}"), i + 1, *s as f64 / 1000.0))
                .collect();
            prop_assert_eq!(parse_run(&format_run(&run)).unwrap(), run);
        }
    }
}
