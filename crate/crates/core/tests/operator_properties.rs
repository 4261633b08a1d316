//! Properties of the curvature operators over generated fields.

use std::sync::Arc;

use faer::Mat;
use proptest::prelude::*;
use radgraph::curvature_ops::{admissible_tensor, linearize_vertical, n1_operator, n2_operator};
use radgraph::geometry::covariant_gradient;
use radgraph::{build_bundle_grid, BundleGrid, ScalarField};

fn grid(n: usize, d: usize) -> Arc<BundleGrid> {
    match d {
        1 => build_bundle_grid(n, 1, 8, &[32], None).unwrap(),
        _ => build_bundle_grid(n, 2, 8, &[8, 16], None).unwrap(),
    }
}

/// Smooth field built from the ambient fiber point and the base coordinate.
fn field(g: &Arc<BundleGrid>, a: &[f64]) -> ScalarField {
    ScalarField::from_fn(g.clone(), |c| {
        let [p, q, r] = c.dir;
        a[0] * p + a[1] * q + a[2] * r + a[3] * p * q + a[4] * (q * q - r * r) + a[5] * c.x[0].sin() * p
    })
}

fn coeffs(scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, 6)
}

fn min_singular_value(rows: Vec<Vec<f64>>) -> f64 {
    let n = rows.len();
    let m = Mat::<f64>::from_fn(n, n, |i, j| rows[i][j]);
    m.singular_values().expect("svd").into_iter().fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constants_have_unit_determinants(c in -4.0f64..4.0, n in 0usize..=1, d in 1usize..=2) {
        let u = ScalarField::constant(grid(n, d), c);
        prop_assert!(n2_operator(&u).iter().all(|v| *v == 1.0));
        prop_assert!(n1_operator(&u).iter().all(|v| *v == 1.0));
    }

    /// N₂ and |D^v u| only see derivatives, so shifting u changes neither.
    #[test]
    fn shift_leaves_vertical_quantities(a in coeffs(0.1), c in -2.0f64..2.0, d in 1usize..=2) {
        let g = grid(1, d);
        let u = field(&g, &a);
        let v = u.with_values(u.values().iter().map(|x| x + c).collect());
        let (n0, n1) = (n2_operator(&u), n2_operator(&v));
        for (x, y) in n0.iter().zip(&n1) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
        let (g0, g1) = (covariant_gradient(&u).grad, covariant_gradient(&v).grad);
        for al in 1..=d {
            for (x, y) in g0[al].iter().zip(&g1[al]) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pulled_back_fields_have_no_vertical_gradient(a in prop::collection::vec(-1.0f64..1.0, 3), d in 1usize..=2) {
        let g = build_bundle_grid(2, d, 8, if d == 1 { &[16][..] } else { &[8, 16][..] }, None).unwrap();
        let u = ScalarField::from_fn(g, |c| a[0] * c.x[0].sin() + a[1] * (2.0 * c.x[1]).cos() + a[2]);
        let fd = covariant_gradient(&u);
        for al in 2..2 + d {
            prop_assert!(fd.grad[al].iter().all(|v| *v == 0.0));
        }
    }

    /// log det is concave on positive-definite matrices; along a segment of
    /// admissible fields the second difference of log N₂ must not be positive
    /// beyond the size of the quadratic gradient terms in the blocks.
    #[test]
    fn log_n2_concave_along_segments(a in coeffs(0.05), b in coeffs(0.05)) {
        let g = grid(0, 2);
        let (u0, u1) = (field(&g, &a), field(&g, &b));
        let ds = 0.1;
        let logs: Vec<Vec<f64>> = (0..=10)
            .map(|k| {
                let s = k as f64 * ds;
                let us = u0.with_values(u0.values().iter().zip(u1.values()).map(|(x, y)| (1.0 - s) * x + s * y).collect());
                prop_assume!(admissible_tensor(&us).admissible);
                Ok(n2_operator(&us).iter().map(|v| v.ln()).collect())
            })
            .collect::<Result<_, _>>()?;
        // Gradient terms are O(|Du|²); their second difference in s is bounded
        // by 2·ds²·max|D(u1−u0)|², which serves as the allowance.
        let diff = u1.with_values(u1.values().iter().zip(u0.values()).map(|(x, y)| x - y).collect());
        let gd = covariant_gradient(&diff).grad;
        let gmax = gd.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let allowance = 4.0 * ds * ds * gmax * gmax + 1e-12;
        for k in 1..10 {
            for i in 0..g.len() {
                let second = logs[k - 1][i] - 2.0 * logs[k][i] + logs[k + 1][i];
                prop_assert!(second <= allowance, "s = {}, node {i}: {second:e} > {allowance:e}", k as f64 * ds);
            }
        }
    }

    #[test]
    fn vertical_linearization_singular_value_floor(lambda in 0.2f64..4.0, a in coeffs(0.05), d in 1usize..=2) {
        let g = grid(0, d);
        let u = field(&g, &a);
        prop_assume!(admissible_tensor(&u).admissible);
        let j = linearize_vertical(&u, lambda, 0.0).unwrap();
        let smin = min_singular_value(j.to_dense());
        prop_assert!(smin >= 0.5 * lambda, "smallest singular value {smin} < lambda/2 = {}", 0.5 * lambda);
    }
}
