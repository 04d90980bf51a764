//! Adapted re-ranking query.
//!
//! A text query lives in the text half of a contrastively trained embedding
//! space, while the gallery lives in the image half. Neighbor-based
//! re-ranking works on image-image structure, so the query is first moved
//! into image space:
//!
//! 1. score each pooled candidate against the query, `s = M_c q`;
//! 2. scale each candidate row by its score, `M_s[i] = s[i] * M_c[i]`;
//! 3. take the left singular vector `u` of `M_s` for the largest singular
//!    value;
//! 4. the adapted query is `u^T M_c`, sign-fixed to agree with `q` and
//!    normalized.
//!
//! Only the top singular direction is needed, so step 3 runs power
//! iteration on the `M x M` Gram operator `M_s M_s^T` instead of a full SVD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{dot, norm};
use crate::store::EmbeddingMatrix;

/// Below this norm the similarity column is treated as zero.
pub const DEGENERATE_SIMILARITY_NORM: f64 = 1e-10;

/// Perturbation added to the first coordinate of the start vector when the
/// all-ones start lies in the null space.
pub const START_PERTURBATION: f64 = 1e-3;

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not equal {rows} x {cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `A^T y`
    pub fn t_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }
}

/// Candidates scaled row-wise by their similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCandidates {
    /// `M_s`, row `i` equal to `similarities[i] * M_c[i]`.
    pub matrix: DenseMatrix,
    /// Query-candidate similarities, after clamping when requested.
    pub similarities: Vec<f64>,
}

/// Scores `m_c` against `q` and scales each row by its score.
///
/// With `clamp`, negative scores become zero so that negatively similar
/// candidates drop out instead of pulling the principal direction around.
pub fn weight_candidates<T>(
    m_c: &EmbeddingMatrix,
    q: &[T],
    clamp: bool,
) -> Result<WeightedCandidates>
where
    T: Copy + Into<f64>,
{
    if q.len() != m_c.dim() {
        return Err(Error::shape(m_c.dim(), q.len(), "query"));
    }
    if m_c.is_empty() {
        return Err(Error::Precondition("no candidates to weight".into()));
    }
    let mut similarities = Vec::with_capacity(m_c.rows());
    let mut data = Vec::with_capacity(m_c.rows() * m_c.dim());
    for row in m_c.iter_rows() {
        let mut s = dot(row, q);
        if clamp && s < 0.0 {
            s = 0.0;
        }
        similarities.push(s);
        data.extend(row.iter().map(|&v| s * f64::from(v)));
    }
    Ok(WeightedCandidates {
        matrix: DenseMatrix::new(m_c.rows(), m_c.dim(), data)?,
        similarities,
    })
}

/// Dominant left singular vector and value.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularVector {
    /// Unit-norm left singular vector, length `M`.
    pub u: Vec<f64>,
    /// `||M_s^T u||`.
    pub sigma: f64,
    pub iterations: usize,
    /// False when `max_iter` ran out first; `u` is then the last iterate.
    pub converged: bool,
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Deterministic start vector: normalized all-ones, nudged off the null
/// space of `M_s^T` when needed.
fn start_vector(m_s: &DenseMatrix, null_tol: f64) -> Vec<f64> {
    let m = m_s.rows();
    let mut u = vec![1.0; m];
    normalize_in_place(&mut u);
    if norm(&m_s.t_mul_vec(&u)) > null_tol {
        return u;
    }
    u[0] += START_PERTURBATION;
    normalize_in_place(&mut u);
    if norm(&m_s.t_mul_vec(&u)) > null_tol {
        return u;
    }
    // Both starts annihilated: begin at the heaviest row instead.
    let heaviest = (0..m)
        .max_by(|&a, &b| {
            norm(m_s.row(a))
                .total_cmp(&norm(m_s.row(b)))
                .then(b.cmp(&a))
        })
        .unwrap_or(0);
    let mut e = vec![0.0; m];
    e[heaviest] = 1.0;
    e
}

/// Power iteration `u <- normalize(M_s (M_s^T u))` until successive
/// iterates are closer than `tol`.
pub fn top_left_singular_vector(
    m_s: &DenseMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<SingularVector> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    let fro = m_s.frobenius_norm();
    if m_s.rows() == 0 || fro == 0.0 {
        return Err(Error::Degenerate("matrix is entirely zero".into()));
    }

    let mut u = start_vector(m_s, fro * 1e-12);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let mut next = m_s.mul_vec(&m_s.t_mul_vec(&u));
        if normalize_in_place(&mut next) == 0.0 {
            break;
        }
        let step = next
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        u = next;
        if step < tol {
            converged = true;
            break;
        }
    }
    let sigma = norm(&m_s.t_mul_vec(&u));
    Ok(SingularVector {
        u,
        sigma,
        iterations,
        converged,
    })
}

/// Settings for building the adapted query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptionConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub clamp_nonnegative: bool,
}

impl Default for AdaptionConfig {
    fn default() -> Self {
        AdaptionConfig {
            tol: 1e-7,
            max_iter: 1000,
            clamp_nonnegative: false,
        }
    }
}

impl AdaptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// The image-space surrogate of a text query.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedQuery {
    /// Unit-norm query vector, length `D`.
    pub vector: Vec<f64>,
    pub top_singular_value: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// True when weighting was degenerate and `vector` is the raw query.
    pub fallback: bool,
}

impl AdaptedQuery {
    /// The raw query, used when no adapted direction can be formed.
    pub fn passthrough<T: Copy + Into<f64>>(q: &[T]) -> Self {
        AdaptedQuery {
            vector: q.iter().map(|&v| v.into()).collect(),
            top_singular_value: 0.0,
            iterations_used: 0,
            converged: false,
            fallback: true,
        }
    }
}

/// Builds the adapted query from pooled candidates `m_c` and query `q`.
///
/// When the similarity column is (near) zero the raw query comes back with
/// `fallback` set, so downstream ranking degrades to plain cosine order.
pub fn adapted_query<T>(
    m_c: &EmbeddingMatrix,
    q: &[T],
    cfg: &AdaptionConfig,
) -> Result<AdaptedQuery>
where
    T: Copy + Into<f64>,
{
    cfg.validate()?;
    let weighted = weight_candidates(m_c, q, cfg.clamp_nonnegative)?;
    if norm(&weighted.similarities) < DEGENERATE_SIMILARITY_NORM
        || weighted.matrix.frobenius_norm() == 0.0
    {
        return Ok(AdaptedQuery::passthrough(q));
    }
    let sv = top_left_singular_vector(&weighted.matrix, cfg.tol, cfg.max_iter)?;

    let mut vector = vec![0.0f64; m_c.dim()];
    for (row, &ui) in m_c.iter_rows().zip(&sv.u) {
        for (acc, &x) in vector.iter_mut().zip(row) {
            *acc += ui * f64::from(x);
        }
    }
    if dot(&vector, q) < 0.0 {
        vector.iter_mut().for_each(|x| *x = -*x);
    }
    if normalize_in_place(&mut vector) < 1e-12 {
        return Ok(AdaptedQuery::passthrough(q));
    }
    Ok(AdaptedQuery {
        vector,
        top_singular_value: sv.sigma,
        iterations_used: sv.iterations,
        converged: sv.converged,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn weighting_scales_rows_by_similarity() {
        let w = weight_candidates(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0.8f32, 0.6], false).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-7;
        assert!(close(w.similarities[0], 0.8) && close(w.similarities[1], 0.6));
        let d = w.matrix.as_slice();
        assert!(close(d[0], 0.8) && d[1] == 0.0 && d[2] == 0.0 && close(d[3], 0.6));
    }

    #[test]
    fn orthogonal_query_gives_zero_weights() {
        let w = weight_candidates(&m(&[&[1.0, 0.0], &[1.0, 0.0]]), &[0.0f32, 1.0], false).unwrap();
        assert!(w.matrix.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clamp_zeroes_negative_rows() {
        let c = m(&[&[1.0, 0.0], &[-0.3, 0.0]]);
        let raw = weight_candidates(&c, &[1.0f32, 0.0], false).unwrap();
        assert!((raw.similarities[1] + 0.3).abs() < 1e-7);
        let w = weight_candidates(&c, &[1.0f32, 0.0], true).unwrap();
        assert_eq!(w.similarities[1], 0.0);
        assert_eq!(w.matrix.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn weighting_shape_error() {
        assert!(matches!(
            weight_candidates(&m(&[&[1.0, 0.0]]), &[1.0f32], false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rank_one_closed_form() {
        let s = [1.0, -2.0, 0.5];
        let v = [0.3, 0.4];
        let data: Vec<f64> = s
            .iter()
            .flat_map(|a| v.iter().map(move |b| a * b))
            .collect();
        let ms = DenseMatrix::new(3, 2, data).unwrap();
        let r = top_left_singular_vector(&ms, 1e-10, 1000).unwrap();
        assert!(r.converged);
        let ns = norm(&s);
        let cos = dot(&r.u, &s) / ns;
        assert!((cos.abs() - 1.0).abs() < 1e-12, "cos {cos}");
        assert!((r.sigma - ns * norm(&v)).abs() < 1e-12);
    }

    #[test]
    fn diagonal_closed_form() {
        let ms = DenseMatrix::new(2, 2, vec![0.8, 0.0, 0.0, 0.6]).unwrap();
        let r = top_left_singular_vector(&ms, 1e-7, 1000).unwrap();
        assert!(r.converged);
        assert!((r.u[0].abs() - 1.0).abs() < 1e-7 && r.u[1].abs() < 1e-6);
        assert!((r.sigma - 0.8).abs() < 1e-9);
    }

    #[test]
    fn null_space_start_is_perturbed() {
        // all-ones is orthogonal to the only column direction
        let ms = DenseMatrix::new(2, 1, vec![1.0, -1.0]).unwrap();
        let r = top_left_singular_vector(&ms, 1e-9, 1000).unwrap();
        assert!(r.converged);
        assert!((r.u[0].abs() - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((r.u[0] + r.u[1]).abs() < 1e-9);
        assert!((r.sigma - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let ms = DenseMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            top_left_singular_vector(&ms, 1e-7, 10),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        // equal top singular values: iterates never settle below tol in one step
        let ms =
            DenseMatrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.99999]).unwrap();
        let r = top_left_singular_vector(&ms, 1e-15, 3).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!((norm(&r.u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_aligns_with_query() {
        let a = adapted_query(
            &m(&[&[0.0, 1.0]]),
            &[0.0f32, 1.0],
            &AdaptionConfig::default(),
        )
        .unwrap();
        assert!(!a.fallback);
        assert!(a.vector[0].abs() < 1e-12 && (a.vector[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_example_adapted_query() {
        let a = adapted_query(
            &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &[0.8f32, 0.6],
            &AdaptionConfig::default(),
        )
        .unwrap();
        assert!(a.converged);
        assert!((a.vector[0] - 1.0).abs() < 1e-6 && a.vector[1].abs() < 1e-3);
        assert!((a.top_singular_value - 0.8).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_query_falls_back() {
        let q = [0.0f32, 0.0, 1.0];
        let a = adapted_query(
            &m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]),
            &q,
            &AdaptionConfig::default(),
        )
        .unwrap();
        assert!(a.fallback && !a.converged);
        assert_eq!(a.vector, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sign_is_fixed_toward_query() {
        // Negative similarities flip every weighted row; the adapted query
        // must still point toward q.
        let c = m(&[&[-1.0, 0.0], &[-0.9, 0.1]]);
        let q = [0.6f32, 0.8];
        let a = adapted_query(&c, &q, &AdaptionConfig::default()).unwrap();
        assert!(dot(&a.vector, &q) >= 0.0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = AdaptionConfig {
            tol: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            adapted_query(&m(&[&[1.0, 0.0]]), &[1.0f32, 0.0], &cfg),
            Err(Error::Config(_))
        ));
    }
}
