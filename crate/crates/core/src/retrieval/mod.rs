//! Similarity ranking and evaluation metrics.

mod index;

pub use index::{EmbeddingIndex, INDEX_MAGIC, INDEX_VERSION};

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Strategy;
use crate::objectives::NUM_CLASSES;
use crate::tensor::{ops, Tensor};

/// `q·dbᵀ`; cosine similarity for unit rows.
pub fn cosine_sim_matrix(q: &Tensor, db: &Tensor) -> Result<Tensor> {
    let (m, d) = q.dims2()?;
    let (n, e) = db.dims2()?;
    if d != e {
        return Err(Error::dim("cosine_sim_matrix", q.shape(), db.shape()));
    }
    Tensor::new(&[m, n], ops::matmul_nt(q.data(), db.data(), m, d, n))
}

/// Row-softmax of the text/image dot products.
pub fn text_image_scores(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut s = cosine_sim_matrix(u, v)?;
    let (m, n) = s.dims2()?;
    for r in 0..m {
        ops::softmax_in_place(&mut s.data_mut()[r * n..(r + 1) * n]);
    }
    Ok(s)
}

/// Candidates for one query, best first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedResult {
    pub query: usize,
    /// `(candidate index, score)`, scores non-increasing.
    pub candidates: Vec<(usize, f64)>,
}

impl RankedResult {
    /// 1-based rank of the first candidate in `relevant`.
    pub fn first_relevant_rank(&self, relevant: &HashSet<usize>) -> Option<usize> {
        self.candidates.iter().position(|(c, _)| relevant.contains(c)).map(|p| p + 1)
    }
}

/// Sorts each row of `scores` descending, ties broken by ascending column.
/// With `exclude_self` the matrix must be square and row `i` drops column `i`.
pub fn rank_queries(scores: &Tensor, exclude_self: bool) -> Result<Vec<RankedResult>> {
    let (m, n) = scores.dims2()?;
    if exclude_self && m != n {
        return Err(Error::dim("rank_queries", &[m, n], &[n, n]));
    }
    Ok(Strategy::default().map(m, |q| {
        let row = scores.row(q);
        let mut candidates: Vec<(usize, f64)> = (0..n)
            .filter(|&c| !(exclude_self && c == q))
            .map(|c| (c, row[c]))
            .collect();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        RankedResult { query: q, candidates }
    }))
}

fn check_relevance(results: &[RankedResult], relevant: &[HashSet<usize>]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Evaluation("no queries to evaluate".into()));
    }
    for r in results {
        match relevant.get(r.query) {
            Some(set) if !set.is_empty() => {}
            _ => return Err(Error::Evaluation(format!("query {} has no relevant items", r.query))),
        }
    }
    Ok(())
}

/// Share of queries with a relevant candidate among the top `k`.
pub fn recall_at_k(results: &[RankedResult], relevant: &[HashSet<usize>], k: usize) -> Result<f64> {
    check_relevance(results, relevant)?;
    let hits = results
        .iter()
        .filter(|r| r.first_relevant_rank(&relevant[r.query]).is_some_and(|rank| rank <= k))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean reciprocal rank of the first relevant candidate (0 when none is
/// ranked).
pub fn mrr(results: &[RankedResult], relevant: &[HashSet<usize>]) -> Result<f64> {
    check_relevance(results, relevant)?;
    let total: f64 = results
        .iter()
        .map(|r| r.first_relevant_rank(&relevant[r.query]).map_or(0.0, |rank| 1.0 / rank as f64))
        .sum();
    Ok(total / results.len() as f64)
}

/// Class-match relevance: candidate `j` is relevant to query `i` when their
/// labels agree (and `j ≠ i` when `exclude_self`).
pub fn class_relevance(query_labels: &[usize], db_labels: &[usize], exclude_self: bool) -> Vec<HashSet<usize>> {
    query_labels
        .iter()
        .enumerate()
        .map(|(q, &lq)| {
            db_labels
                .iter()
                .enumerate()
                .filter(|&(j, &lj)| lj == lq && !(exclude_self && j == q))
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy and macro precision/recall/F1.
///
/// Macro averages run over the classes that occur in `truth` or `pred`. A
/// class that is never predicted has precision 0; one that never occurs has
/// recall 0.
pub fn classification_report(pred: &[usize], truth: &[usize]) -> Result<ClassificationReport> {
    if pred.len() != truth.len() {
        return Err(Error::Evaluation(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Evaluation("no predictions to score".into()));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Label(format!("label {bad} outside [0, {NUM_CLASSES})")));
    }
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p_sum, mut r_sum, mut f_sum, mut present) = (0.0, 0.0, 0.0, 0);
    for c in 0..NUM_CLASSES {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        let p = ratio(confusion[c][c], predicted);
        let r = ratio(confusion[c][c], support);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
        present += 1;
    }
    let k = present as f64;
    Ok(ClassificationReport {
        confusion,
        accuracy: ratio(correct, pred.len()),
        precision: p_sum / k,
        recall: r_sum / k,
        f1: f_sum / k,
    })
}
