//! Dense similarity matrices and exhaustive top-K cosine search.
//!
//! Similarity is a plain dot product. Callers get cosine semantics by
//! normalizing their inputs first with [`l2_normalize`](crate::store::l2_normalize);
//! nothing here normalizes internally.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::ranking::{RankedEntry, RankedList};
use crate::store::{EmbeddingMatrix, Manifest};

/// Dot product accumulated in `f64`, strictly left to right.
///
/// The fixed summation order makes every similarity in the crate bitwise
/// reproducible regardless of how queries are spread over threads.
#[inline]
pub fn dot<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x.into() * y.into();
    }
    acc
}

/// Euclidean norm accumulated in `f64`.
pub fn norm<A: Copy + Into<f64>>(a: &[A]) -> f64 {
    dot(a, a).sqrt()
}

/// `rows x cols` matrix of pairwise dot products.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> SimilarityMatrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        SimilarityMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// `A * B^T`: entry `(i, j)` is the dot product of row `i` of `a` with row
/// `j` of `b`.
///
/// With `a` as image embeddings and `b` as text embeddings this is the
/// text-image similarity matrix; with a single-row `b` it is the column of
/// query-candidate similarities.
pub fn similarity_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim(), "similarity_matrix"));
    }
    let mut data = Vec::with_capacity(a.rows() * b.rows());
    for ra in a.iter_rows() {
        data.extend(b.iter_rows().map(|rb| dot(ra, rb)));
    }
    Ok(SimilarityMatrix {
        rows: a.rows(),
        cols: b.rows(),
        data,
    })
}

/// Descending score, then ascending row index.
#[inline]
pub(crate) fn by_score_desc(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Scores every gallery row against `query` and returns `(row, score)`
/// pairs, best first, ties by ascending row.
pub fn score_rows<T>(query: &[T], gallery: &EmbeddingMatrix) -> Result<Vec<(usize, f64)>>
where
    T: Copy + Into<f64>,
{
    if query.len() != gallery.dim() {
        return Err(Error::shape(gallery.dim(), query.len(), "query"));
    }
    let mut scored: Vec<(usize, f64)> = gallery
        .iter_rows()
        .enumerate()
        .map(|(i, row)| (i, dot(query, row)))
        .collect();
    scored.sort_by(by_score_desc);
    Ok(scored)
}

/// Exhaustive top-`k` search of `gallery` by dot product.
///
/// Returns `min(k, N)` entries. An empty gallery yields an empty list.
pub fn top_k_search<T>(
    query_id: &str,
    query: &[T],
    gallery: &EmbeddingMatrix,
    k: usize,
    ids: &Manifest,
) -> Result<RankedList>
where
    T: Copy + Into<f64>,
{
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    ids.check_aligned(gallery, "gallery")?;
    if gallery.is_empty() {
        return Ok(RankedList::new(query_id, Vec::new()));
    }
    let mut scored = score_rows(query, gallery)?;
    scored.truncate(k);
    Ok(RankedList::new(query_id, to_entries(&scored, ids)))
}

pub(crate) fn to_entries(scored: &[(usize, f64)], ids: &Manifest) -> Vec<RankedEntry> {
    scored
        .iter()
        .map(|&(i, score)| RankedEntry {
            id: ids.id(i).to_string(),
            score,
        })
        .collect()
}
