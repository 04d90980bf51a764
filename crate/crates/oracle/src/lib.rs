//! Slow, direct reference implementations used as test oracles.
//!
//! Nothing here shares code with the `a3r` crate. Inputs are plain nested
//! vectors and every routine follows its definition literally: full sorts,
//! explicit sets, dense vectors.

// Index loops and spelled-out arithmetic are deliberate: the point is to read
// like the definitions, not like idiomatic Rust.
#![allow(clippy::needless_range_loop, clippy::manual_div_ceil)]

pub mod eigen {
    /// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
    ///
    /// Returns eigenvalues in descending order and the matching unit
    /// eigenvectors.
    pub fn symmetric(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut a: Vec<Vec<f64>> = a.to_vec();
        let mut v: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vkp, vkq) = (row[p], row[q]);
                        row[p] = c * vkp - s * vkq;
                        row[q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
        let values = idx.iter().map(|&i| a[i][i]).collect();
        let vectors = idx
            .iter()
            .map(|&i| v.iter().map(|row| row[i]).collect())
            .collect();
        (values, vectors)
    }

    /// `M M^T` for an `m x d` matrix given by rows.
    pub fn gram(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        m.iter()
            .map(|a| {
                m.iter()
                    .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect()
    }

    /// Dominant left singular vector of `m`, its singular value, and the
    /// second singular value.
    pub fn top_left_singular(m: &[Vec<f64>]) -> (Vec<f64>, f64, f64) {
        let (values, vectors) = symmetric(&gram(m));
        let sigma = |i: usize| values.get(i).map_or(0.0, |&l: &f64| l.max(0.0).sqrt());
        (vectors[0].clone(), sigma(0), sigma(1))
    }
}

pub mod rerank {
    use std::collections::BTreeSet;

    /// `1 - <a, b>` clamped to `[0, 2]`, summing products left to right.
    pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        (1.0 - s).clamp(0.0, 2.0)
    }

    /// Distance matrix over `points`.
    pub fn distances(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = points.len();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    d[i][j] = cosine_distance(&points[i], &points[j]);
                } else if i > j {
                    d[i][j] = d[j][i];
                }
            }
        }
        d
    }

    /// The `k` nearest other points, ties to the lower index.
    pub fn nearest(d: &[Vec<f64>], x: usize, k: usize) -> Vec<usize> {
        let mut others: Vec<usize> = (0..d.len()).filter(|&g| g != x).collect();
        others.sort_by(|&a, &b| d[x][a].partial_cmp(&d[x][b]).unwrap().then(a.cmp(&b)));
        others.truncate(k);
        others
    }

    pub fn reciprocal(d: &[Vec<f64>], p: usize, k: usize) -> BTreeSet<usize> {
        nearest(d, p, k)
            .into_iter()
            .filter(|&g| nearest(d, g, k).contains(&p))
            .collect()
    }

    pub fn expanded(d: &[Vec<f64>], p: usize, k1: usize) -> BTreeSet<usize> {
        let half = (k1 + 1) / 2;
        let r = reciprocal(d, p, k1);
        let rp_half = reciprocal(d, p, half);
        let mut out = r.clone();
        for &q in &r {
            let rq_half = reciprocal(d, q, half);
            let common = rp_half.intersection(&rq_half).count();
            // common >= (2/3) |R(q, half)|, compared in integers
            if 3 * common >= 2 * rq_half.len() {
                out.extend(rq_half);
            }
        }
        out
    }

    /// Final blended distance from point 0 to points `1..n`.
    pub fn final_distances(d: &[Vec<f64>], k1: usize, k2: usize, lambda: f64) -> Vec<f64> {
        let n = d.len();
        let v: Vec<Vec<f64>> = (0..n)
            .map(|x| {
                let set = expanded(d, x, k1);
                (0..n)
                    .map(|g| {
                        if set.contains(&g) {
                            (-d[x][g]).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        // The expansion group is x together with its k2 - 1 nearest others,
        // visited in ascending index order.
        let expanded_v: Vec<Vec<f64>> = (0..n)
            .map(|x| {
                let mut group: BTreeSet<usize> = nearest(d, x, k2 - 1).into_iter().collect();
                group.insert(x);
                (0..n)
                    .map(|g| {
                        let mut s = 0.0;
                        for &y in &group {
                            s += v[y][g];
                        }
                        s / group.len() as f64
                    })
                    .collect()
            })
            .collect();
        (1..n)
            .map(|g| {
                let mut mins = 0.0;
                let mut maxs = 0.0;
                for i in 0..n {
                    mins += expanded_v[0][i].min(expanded_v[g][i]);
                    maxs += expanded_v[0][i].max(expanded_v[g][i]);
                }
                let jaccard = if maxs == 0.0 { 1.0 } else { 1.0 - mins / maxs };
                (1.0 - lambda) * jaccard + lambda * d[0][g]
            })
            .collect()
    }

    /// Candidate order (0-based candidate indices) for `probe` over
    /// `candidates`: ascending final distance, then descending similarity,
    /// then ascending index.
    pub fn order(
        probe: &[f64],
        candidates: &[Vec<f64>],
        k1: usize,
        k2: usize,
        lambda: f64,
    ) -> Vec<usize> {
        let sims: Vec<f64> = candidates
            .iter()
            .map(|c| {
                let mut s = 0.0;
                for i in 0..c.len() {
                    s += probe[i] * c[i];
                }
                s
            })
            .collect();
        if candidates.len() <= 1 {
            return (0..candidates.len()).collect();
        }
        let mut points = vec![probe.to_vec()];
        points.extend(candidates.iter().cloned());
        let finals = final_distances(&distances(&points), k1, k2, lambda);
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.sort_by(|&a, &b| {
            finals[a]
                .partial_cmp(&finals[b])
                .unwrap()
                .then(sims[b].partial_cmp(&sims[a]).unwrap())
                .then(a.cmp(&b))
        });
        idx
    }

    /// Plain cosine order: descending similarity, ties to the lower index.
    pub fn cosine_order(probe: &[f64], candidates: &[Vec<f64>]) -> Vec<usize> {
        let sims: Vec<f64> = candidates
            .iter()
            .map(|c| c.iter().zip(probe).map(|(a, b)| a * b).sum())
            .collect();
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        idx
    }
}

pub mod ap {
    /// AP@K by literal enumeration of precision and recall at every cutoff.
    ///
    /// `relevant[i]` says whether the item at rank `i + 1` is relevant;
    /// `total_relevant` counts relevant items overall, ranked or not. With
    /// `strict` the recall denominator is `total_relevant`, otherwise
    /// `min(total_relevant, k)`.
    pub fn average_precision(
        relevant: &[bool],
        total_relevant: usize,
        k: usize,
        strict: bool,
    ) -> f64 {
        let denom = if strict {
            total_relevant
        } else {
            total_relevant.min(k)
        } as f64;
        let hits_at = |i: usize| relevant[..i].iter().filter(|&&r| r).count() as f64;
        let p = |i: usize| hits_at(i) / i as f64;
        let r = |i: usize| if i == 0 { 0.0 } else { hits_at(i) / denom };
        (1..=k.min(relevant.len()))
            .map(|i| p(i) * (r(i) - r(i - 1)))
            .sum()
    }
}
