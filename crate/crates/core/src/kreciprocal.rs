//! k-reciprocal encoding re-ranking.
//!
//! The probe and its `M` candidates form one point set of size `M + 1`,
//! with the probe at index 0 and candidate `i` at index `i + 1`. Over that
//! set:
//!
//! * `N(x, k)` is the `k` nearest other points of `x` by cosine distance,
//!   ties broken by ascending index;
//! * `R(x, k)` keeps the members `g` of `N(x, k)` that also have `x` in
//!   `N(g, k)`;
//! * `R*(x, k1)` grows `R(x, k1)` by `R(q, ceil(k1/2))` for every
//!   `q in R(x, k1)` whose half-size set overlaps `R(x, ceil(k1/2))` in at
//!   least two thirds of its own members;
//! * each point is encoded as `V_x[g] = exp(-d(x, g))` on `R*(x, k1)` and
//!   zero elsewhere, then replaced by the mean encoding of itself and its
//!   `k2 - 1` nearest neighbors;
//! * the Jaccard distance between encodings, `1 - sum(min) / sum(max)`, is
//!   blended with the original distance:
//!   `d* = (1 - lambda) * d_J + lambda * d`.
//!
//! Candidates are returned by ascending `d*`. Exactly tied `d*` fall back to
//! the higher original similarity and then to the lower candidate index, so
//! with `lambda = 1` the order is exactly plain cosine order.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{RankedEntry, RankedList};
use crate::similarity::dot;
use crate::store::EmbeddingMatrix;

/// k-reciprocal parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KrConfig {
    /// Reciprocal neighborhood size.
    pub k1: usize,
    /// Local query expansion size, counting the point itself.
    pub k2: usize,
    /// Weight of the original distance in the final blend.
    pub lambda: f64,
}

impl Default for KrConfig {
    fn default() -> Self {
        KrConfig {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl KrConfig {
    /// Checks `1 <= k2 <= k1` and `0 <= lambda <= 1`.
    pub fn validate(&self) -> Result<()> {
        if self.k2 == 0 || self.k2 > self.k1 {
            return Err(Error::Config(format!(
                "need 1 <= k2 <= k1, got k1 = {}, k2 = {}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Shrinks `k1` and `k2` to fit a pool of `m` candidates.
    pub fn clamped_to(&self, m: usize) -> KrConfig {
        let k1 = self.k1.min(m).max(1);
        KrConfig {
            k1,
            k2: self.k2.min(k1).max(1),
            lambda: self.lambda,
        }
    }

    /// Checks [`validate`](Self::validate) plus `k1 <= m` for a pool of `m`.
    pub fn validate_for_pool(&self, m: usize) -> Result<()> {
        self.validate()?;
        if self.k1 > m {
            return Err(Error::Config(format!(
                "k1 = {} exceeds the {m} available candidates",
                self.k1
            )));
        }
        Ok(())
    }
}

/// Symmetric cosine-distance matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Distances over `{probe} ∪ gallery`, probe first.
    ///
    /// Entries are `1 - dot`, clamped to `[0, 2]`.
    pub fn from_probe_and_gallery(probe: &[f64], gallery: &EmbeddingMatrix) -> Result<Self> {
        if probe.len() != gallery.dim() {
            return Err(Error::shape(gallery.dim(), probe.len(), "probe"));
        }
        let n = gallery.rows() + 1;
        let mut data = vec![0.0; n * n];
        let dist = |s: f64| (1.0 - s).clamp(0.0, 2.0);
        for j in 1..n {
            let d = dist(dot(probe, gallery.row(j - 1)));
            data[j] = d;
            data[j * n] = d;
        }
        for i in 1..n {
            for j in (i + 1)..n {
                let d = dist(dot(gallery.row(i - 1), gallery.row(j - 1)));
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Ok(DistanceMatrix { n, data })
    }

    /// Wraps an explicit `n x n` matrix after checking symmetry (within
    /// `1e-9`), a zero diagonal and entries in `[0, 2]`.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "expected {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(Error::Validation(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..n {
                let d = data[i * n + j];
                if !(0.0..=2.0).contains(&d) {
                    return Err(Error::Validation(format!(
                        "entry ({i}, {j}) = {d} outside [0, 2]"
                    )));
                }
                if (d - data[j * n + i]).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "entry ({i}, {j}) is not symmetric"
                    )));
                }
            }
        }
        Ok(DistanceMatrix { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn check_index(&self, p: usize) -> Result<()> {
        if p >= self.n {
            return Err(Error::Index {
                index: p,
                len: self.n,
            });
        }
        Ok(())
    }
}

/// Sorted neighbor lists and rank lookups for every point.
struct Neighborhoods {
    n: usize,
    /// `order[x]`: all other points by ascending distance, then index.
    order: Vec<Vec<usize>>,
    /// `rank[x * n + g]`: position of `g` in `order[x]`.
    rank: Vec<usize>,
}

impl Neighborhoods {
    fn new(d: &DistanceMatrix) -> Self {
        let n = d.len();
        let mut order = Vec::with_capacity(n);
        let mut rank = vec![usize::MAX; n * n];
        for x in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&g| g != x).collect();
            others.sort_by(|&a, &b| d.get(x, a).total_cmp(&d.get(x, b)).then(a.cmp(&b)));
            for (pos, &g) in others.iter().enumerate() {
                rank[x * n + g] = pos;
            }
            order.push(others);
        }
        Neighborhoods { n, order, rank }
    }

    #[inline]
    fn is_knn(&self, x: usize, g: usize, k: usize) -> bool {
        x != g && self.rank[x * self.n + g] < k
    }

    fn nearest(&self, x: usize, k: usize) -> &[usize] {
        &self.order[x][..k.min(self.order[x].len())]
    }

    /// `R(p, k)`, ascending.
    fn reciprocal(&self, p: usize, k: usize) -> Vec<usize> {
        let mut r: Vec<usize> = self
            .nearest(p, k)
            .iter()
            .copied()
            .filter(|&g| self.is_knn(g, p, k))
            .collect();
        r.sort_unstable();
        r
    }
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// The two-thirds overlap rule, in exact integer arithmetic.
#[inline]
fn overlap_ok(common: usize, candidate_len: usize) -> bool {
    3 * common >= 2 * candidate_len
}

fn expand(reciprocal: &[Vec<usize>], half: &[Vec<usize>], p: usize) -> Vec<usize> {
    let mut set = reciprocal[p].clone();
    for &q in &reciprocal[p] {
        let common = sorted_intersection_len(&half[p], &half[q]);
        if overlap_ok(common, half[q].len()) {
            set.extend_from_slice(&half[q]);
        }
    }
    set.sort_unstable();
    set.dedup();
    set
}

/// `R(p, k)`: points that are among `p`'s `k` nearest and have `p` among
/// their own `k` nearest. Ascending indices.
pub fn reciprocal_set(d: &DistanceMatrix, p: usize, k: usize) -> Result<Vec<usize>> {
    d.check_index(p)?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(Neighborhoods::new(d).reciprocal(p, k))
}

/// `R*(p, k1)`, the expanded reciprocal set. Ascending indices.
pub fn expanded_set(d: &DistanceMatrix, p: usize, k1: usize) -> Result<Vec<usize>> {
    d.check_index(p)?;
    if k1 == 0 {
        return Err(Error::Config("k1 must be at least 1".into()));
    }
    let nb = Neighborhoods::new(d);
    let half_k = k1.div_ceil(2);
    let reciprocal: Vec<Vec<usize>> = (0..nb.n).map(|x| nb.reciprocal(x, k1)).collect();
    let half: Vec<Vec<usize>> = (0..nb.n).map(|x| nb.reciprocal(x, half_k)).collect();
    Ok(expand(&reciprocal, &half, p))
}

/// Final blended distance from the probe (point 0) to every candidate,
/// in candidate order.
pub fn k_reciprocal_distances(d: &DistanceMatrix, cfg: &KrConfig) -> Result<Vec<f64>> {
    let n = d.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    cfg.validate_for_pool(n - 1)?;
    let nb = Neighborhoods::new(d);
    let half_k = cfg.k1.div_ceil(2);
    let reciprocal: Vec<Vec<usize>> = (0..n).map(|x| nb.reciprocal(x, cfg.k1)).collect();
    let half: Vec<Vec<usize>> = (0..n).map(|x| nb.reciprocal(x, half_k)).collect();

    // Sparse encodings on the expanded sets.
    let encodings: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|x| {
            expand(&reciprocal, &half, x)
                .into_iter()
                .map(|g| (g, (-d.get(x, g)).exp()))
                .collect()
        })
        .collect();

    // Local expansion: mean over x and its k2 - 1 nearest, summed in
    // ascending point order.
    let mut expanded = vec![0.0f64; n * n];
    let mut group = Vec::with_capacity(cfg.k2);
    for x in 0..n {
        group.clear();
        group.push(x);
        group.extend_from_slice(nb.nearest(x, cfg.k2 - 1));
        group.sort_unstable();
        let acc = &mut expanded[x * n..(x + 1) * n];
        for &y in &group {
            for &(g, w) in &encodings[y] {
                acc[g] += w;
            }
        }
        let count = group.len() as f64;
        acc.iter_mut().for_each(|v| *v /= count);
    }

    let probe = &expanded[..n];
    Ok((1..n)
        .map(|g| {
            let other = &expanded[g * n..(g + 1) * n];
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for (&a, &b) in probe.iter().zip(other) {
                num += a.min(b);
                den += a.max(b);
            }
            let jaccard = if den == 0.0 { 1.0 } else { 1.0 - num / den };
            (1.0 - cfg.lambda) * jaccard + cfg.lambda * d.get(0, g)
        })
        .collect())
}

/// Re-ranks the candidate rows of `gallery` for `probe`.
///
/// Returns `(candidate row, 1 - d*)` pairs, best first.
pub fn k_reciprocal_order(
    probe: &[f64],
    gallery: &EmbeddingMatrix,
    cfg: &KrConfig,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if probe.len() != gallery.dim() {
        return Err(Error::shape(gallery.dim(), probe.len(), "probe"));
    }
    let similarities: Vec<f64> = gallery.iter_rows().map(|r| dot(probe, r)).collect();
    if gallery.rows() <= 1 {
        return Ok(similarities.into_iter().enumerate().collect());
    }
    let d = DistanceMatrix::from_probe_and_gallery(probe, gallery)?;
    let finals = k_reciprocal_distances(&d, cfg)?;
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| {
        finals[a]
            .total_cmp(&finals[b])
            .then(similarities[b].total_cmp(&similarities[a]))
            .then(a.cmp(&b))
    });
    Ok(order.into_iter().map(|i| (i, 1.0 - finals[i])).collect())
}

/// [`k_reciprocal_order`] with candidate ids attached.
pub fn k_reciprocal_rerank(
    query_id: &str,
    probe: &[f64],
    gallery: &EmbeddingMatrix,
    ids: &[String],
    cfg: &KrConfig,
) -> Result<RankedList> {
    if ids.len() != gallery.rows() {
        return Err(Error::Validation(format!(
            "{} candidate ids for {} candidate rows",
            ids.len(),
            gallery.rows()
        )));
    }
    let order = k_reciprocal_order(probe, gallery, cfg)?;
    Ok(RankedList::new(
        query_id,
        order
            .into_iter()
            .map(|(i, score)| RankedEntry {
                id: ids[i].clone(),
                score,
            })
            .collect(),
    ))
}
