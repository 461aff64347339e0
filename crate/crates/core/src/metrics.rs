//! Task metrics: rank-1 retrieval accuracy and classification accuracy.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fir::argmax;

/// Fraction of queries whose Euclidean-nearest gallery row has the same
/// identity. Ties go to the lowest gallery index.
pub fn rank1_accuracy(
    query: &Tensor,
    gallery: &Tensor,
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<f64> {
    if query_ids.is_empty() {
        return Err(Error::contract("rank-1 accuracy needs at least one query"));
    }
    if gallery_ids.is_empty() {
        return Err(Error::contract("rank-1 accuracy needs a non-empty gallery"));
    }
    if query.cols() != gallery.cols()
        || query.rows() != query_ids.len()
        || gallery.rows() != gallery_ids.len()
    {
        return Err(Error::Shape {
            op: "rank1_accuracy",
            lhs: query.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let mut hits = 0usize;
    for (q, &qid) in query_ids.iter().enumerate() {
        let qrow = query.row(q);
        let mut best = (f64::INFINITY, 0usize);
        for g in 0..gallery.rows() {
            let d: f64 = qrow
                .iter()
                .zip(gallery.row(g))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, g);
            }
        }
        if gallery_ids[best.1] == qid {
            hits += 1;
        }
    }
    Ok(hits as f64 / query_ids.len() as f64)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn classification_accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "classification_accuracy",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(probs.row(r)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
