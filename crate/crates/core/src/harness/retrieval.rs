//! Recall@K and median rank over a similarity matrix whose diagonal holds the
//! true pairs.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objective::SimilarityMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TextToVideo => "t2v",
            Direction::VideoToText => "v2t",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub direction: Direction,
    /// Percentages in `[0, 100]`.
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Lower median of the 1-based ranks.
    pub medr: usize,
}

impl fmt::Display for RetrievalMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: R@1 {:.1}  R@5 {:.1}  R@10 {:.1}  MedR {}", self.direction, self.r1, self.r5, self.r10, self.medr)
    }
}

/// 1-based rank of the true item for every query. Competitors with an equal
/// score are counted ahead of it.
pub fn ranks(n: usize, values: &[f64], direction: Direction) -> Vec<usize> {
    let score = |query: usize, item: usize| match direction {
        // text query `query` scores video `item`: column of the matrix
        Direction::TextToVideo => values[item * n + query],
        Direction::VideoToText => values[query * n + item],
    };
    (0..n)
        .into_par_iter()
        .map(|q| {
            let truth = score(q, q);
            1 + (0..n).filter(|&j| j != q && score(q, j) >= truth).count()
        })
        .collect()
}

pub fn metrics_from_ranks(ranks: &[usize], direction: Direction) -> RetrievalMetrics {
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    RetrievalMetrics { direction, r1: recall(1), r5: recall(5), r10: recall(10), medr: sorted[(sorted.len() - 1) / 2] }
}

/// `(text→video, video→text)` metrics.
pub fn evaluate_retrieval(sim: &SimilarityMatrix) -> (RetrievalMetrics, RetrievalMetrics) {
    let n = sim.n();
    let t2v = metrics_from_ranks(&ranks(n, sim.values(), Direction::TextToVideo), Direction::TextToVideo);
    let v2t = metrics_from_ranks(&ranks(n, sim.values(), Direction::VideoToText), Direction::VideoToText);
    (t2v, v2t)
}

/// Like [`evaluate_retrieval`] for a raw `rows×cols` score array.
pub fn evaluate_scores(rows: usize, cols: usize, values: &[f64]) -> Result<(RetrievalMetrics, RetrievalMetrics)> {
    if rows != cols {
        return Err(Error::shape(format!("retrieval needs a square matrix, got {rows}×{cols}")));
    }
    let sim = SimilarityMatrix::new(rows, values.to_vec(), 1.0)?;
    Ok(evaluate_retrieval(&sim))
}
