//! Text→image retrieval metrics. Ranking is by descending similarity with
//! ties broken by ascending gallery index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    /// 1-based rank of the first relevant gallery item, per query.
    pub first_hit_ranks: Vec<usize>,
}

/// Gallery indices of one score row, best first.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // `sort_by` is stable, so equal scores keep index order. Adding zero
    // folds -0.0 into 0.0, which `total_cmp` would otherwise rank apart.
    order.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)));
    order
}

fn check_inputs(s: &Tensor, query_ids: &[usize], gallery_ids: &[usize]) -> Result<()> {
    if s.shape().len() != 2 || s.rows() != query_ids.len() || s.cols() != gallery_ids.len() {
        return Err(Error::Shape(format!(
            "similarity {:?} does not match {} queries × {} gallery items",
            s.shape(),
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    if s.rows() == 0 {
        return Err(Error::Evaluation("no queries".into()));
    }
    for (q, id) in query_ids.iter().enumerate() {
        if !gallery_ids.contains(id) {
            return Err(Error::Evaluation(format!(
                "query {q} (identity {id}) has no relevant gallery item"
            )));
        }
    }
    Ok(())
}

fn first_hit(scores: &[f64], id: usize, gallery_ids: &[usize]) -> usize {
    ranking(scores)
        .iter()
        .position(|&g| gallery_ids[g] == id)
        .map(|p| p + 1)
        .expect("checked: every query has a relevant item")
}

/// Fraction of queries with a relevant item in the top `k`.
pub fn rank_k(s: &Tensor, query_ids: &[usize], gallery_ids: &[usize], k: usize) -> Result<f64> {
    check_inputs(s, query_ids, gallery_ids)?;
    let hits = (0..s.rows())
        .filter(|&q| first_hit(s.row(q), query_ids[q], gallery_ids) <= k)
        .count();
    Ok(hits as f64 / s.rows() as f64)
}

fn average_precision(scores: &[f64], id: usize, gallery_ids: &[usize]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, &g) in ranking(scores).iter().enumerate() {
        if gallery_ids[g] == id {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    total / hits as f64
}

/// Mean of non-interpolated average precision over queries.
pub fn mean_ap(s: &Tensor, query_ids: &[usize], gallery_ids: &[usize]) -> Result<f64> {
    check_inputs(s, query_ids, gallery_ids)?;
    let total: f64 = (0..s.rows())
        .map(|q| average_precision(s.row(q), query_ids[q], gallery_ids))
        .sum();
    Ok(total / s.rows() as f64)
}

/// All metrics at once; queries are split across `workers` threads and
/// merged in query order.
pub fn evaluate(
    s: &Tensor,
    query_ids: &[usize],
    gallery_ids: &[usize],
    workers: usize,
) -> Result<RetrievalResult> {
    check_inputs(s, query_ids, gallery_ids)?;
    let n = s.rows();
    let workers = workers.clamp(1, n);
    let chunk = n.div_ceil(workers);
    let per_query: Vec<(usize, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                scope.spawn(move || {
                    (start..(start + chunk).min(n))
                        .map(|q| {
                            let row = s.row(q);
                            (
                                first_hit(row, query_ids[q], gallery_ids),
                                average_precision(row, query_ids[q], gallery_ids),
                            )
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("metric worker panicked"))
            .collect()
    });
    let frac = |k: usize| per_query.iter().filter(|(r, _)| *r <= k).count() as f64 / n as f64;
    Ok(RetrievalResult {
        r1: frac(1),
        r5: frac(5),
        r10: frac(10),
        map: per_query.iter().map(|(_, ap)| ap).sum::<f64>() / n as f64,
        first_hit_ranks: per_query.into_iter().map(|(r, _)| r).collect(),
    })
}
