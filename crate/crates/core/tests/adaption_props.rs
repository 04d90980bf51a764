use a3r::adaption::{
    adapted_query, top_left_singular_vector, weight_candidates, AdaptionConfig, DenseMatrix,
};
use a3r::similarity::dot;
use a3r::store::{l2_normalize, EmbeddingMatrix};
use proptest::prelude::*;

fn pool(
    m: std::ops::RangeInclusive<usize>,
    d: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = EmbeddingMatrix> {
    (m, d).prop_flat_map(|(m, d)| {
        prop::collection::vec(prop::collection::vec(-1f32..1.0, d), m).prop_map(|mut rows| {
            for r in rows.iter_mut() {
                if r.iter().all(|x| x.abs() < 1e-2) {
                    r[0] = 1.0;
                }
            }
            l2_normalize(&EmbeddingMatrix::from_rows(&rows).unwrap()).unwrap()
        })
    })
}

fn query(d: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1f32..1.0, d).prop_map(|mut q| {
        q[0] += 0.5;
        let n = q.iter().map(|x| x * x).sum::<f32>().sqrt();
        q.iter_mut().for_each(|x| *x /= n);
        q
    })
}

fn pool_and_query() -> impl Strategy<Value = (EmbeddingMatrix, Vec<f32>)> {
    pool(1..=20, 1..=8).prop_flat_map(|p| {
        let d = p.dim();
        (Just(p), query(d))
    })
}

fn rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn singular_pair_satisfies_the_eigen_equation((p, q) in pool_and_query()) {
        let w = weight_candidates(&p, &q, false).unwrap();
        prop_assume!(w.matrix.frobenius_norm() > 1e-6);
        let sv = top_left_singular_vector(&w.matrix, 1e-10, 20_000).unwrap();
        prop_assume!(sv.converged);
        let (_, s1, s2) = a3r_oracle::eigen::top_left_singular(&rows(&w.matrix));
        // A near-degenerate top pair makes the direction ill-defined but
        // still fixes the value and the residual.
        prop_assert!((sv.sigma - s1).abs() <= 1e-6 * s1, "sigma {} vs {}", sv.sigma, s1);
        let mmt_u = w.matrix.mul_vec(&w.matrix.t_mul_vec(&sv.u));
        let residual: f64 = mmt_u
            .iter()
            .zip(&sv.u)
            .map(|(a, b)| (a - sv.sigma * sv.sigma * b).powi(2))
            .sum::<f64>()
            .sqrt();
        prop_assert!(residual <= 1e-4 * s1 * s1 + 1e-12, "residual {residual}, gap {}", s1 - s2);
        prop_assert!((dot(&sv.u, &sv.u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rayleigh_quotient_is_maximal(
        (p, q) in pool_and_query(),
        probes in prop::collection::vec(prop::collection::vec(-1f64..1.0, 20), 16),
    ) {
        let w = weight_candidates(&p, &q, false).unwrap();
        prop_assume!(w.matrix.frobenius_norm() > 1e-6);
        let sv = top_left_singular_vector(&w.matrix, 1e-9, 5000).unwrap();
        for x in probes {
            let x = &x[..w.matrix.rows()];
            let n = dot(x, x).sqrt();
            prop_assume!(n > 1e-6);
            let x: Vec<f64> = x.iter().map(|v| v / n).collect();
            let value = dot(&w.matrix.t_mul_vec(&x), &w.matrix.t_mul_vec(&x)).sqrt();
            prop_assert!(value <= sv.sigma * (1.0 + 1e-9), "{value} > {}", sv.sigma);
        }
    }

    #[test]
    fn adapted_query_is_unit_and_points_at_the_query((p, q) in pool_and_query(), clamp in any::<bool>()) {
        let cfg = AdaptionConfig { clamp_nonnegative: clamp, ..Default::default() };
        let a = adapted_query(&p, &q, &cfg).unwrap();
        // A fallback returns the f32 query as is.
        let tol = if a.fallback { 1e-6 } else { 1e-9 };
        prop_assert!((dot(&a.vector, &a.vector).sqrt() - 1.0).abs() < tol);
        prop_assert!(dot(&a.vector, &q) >= 0.0);
        if !a.fallback {
            prop_assert!(a.top_singular_value > 0.0);
        }
    }

    #[test]
    fn adapted_query_ignores_query_scale((p, q) in pool_and_query()) {
        let cfg = AdaptionConfig { tol: 1e-12, max_iter: 20_000, ..Default::default() };
        let a = adapted_query(&p, &q, &cfg).unwrap();
        let doubled: Vec<f32> = q.iter().map(|x| x * 2.0).collect();
        let b = adapted_query(&p, &doubled, &cfg).unwrap();
        prop_assume!(!a.fallback && !b.fallback);
        let w = weight_candidates(&p, &q, false).unwrap();
        let (_, s1, s2) = a3r_oracle::eigen::top_left_singular(&rows(&w.matrix));
        prop_assume!(s1 - s2 > 1e-3 * s1);
        prop_assert!(dot(&a.vector, &b.vector) > 1.0 - 1e-8);
    }
}

#[test]
fn oracle_agrees_on_a_hand_built_pool() {
    // Two tight groups; the larger, more similar one dominates.
    let p = l2_normalize(
        &EmbeddingMatrix::from_rows(&[
            [1.0f32, 0.1, 0.0],
            [1.0, -0.1, 0.0],
            [1.0, 0.0, 0.1],
            [0.0, 1.0, 0.0],
        ])
        .unwrap(),
    )
    .unwrap();
    let q = [0.8f32, 0.6, 0.0];
    let w = weight_candidates(&p, &q, false).unwrap();
    let sv = top_left_singular_vector(&w.matrix, 1e-12, 10_000).unwrap();
    let (u, s1, _) = a3r_oracle::eigen::top_left_singular(&rows(&w.matrix));
    assert!(dot(&u, &sv.u).abs() > 1.0 - 1e-10);
    assert!((sv.sigma - s1).abs() < 1e-10);
    let a = adapted_query(&p, &q, &AdaptionConfig::default()).unwrap();
    assert!(a.vector[0] > a.vector[1]);
}
