//! Solver invariants over small generated problems.

use std::sync::Arc;

use proptest::prelude::*;
use radgraph::solvers::{
    continuity_path_theorem3, nagumo_iteration_theorem4, solve_direct, uniqueness_probe, SolverConfig,
};
use radgraph::{build_bundle_grid, BundleGrid, CurvatureSpec, Error, ScalarField};

fn circle(n: usize) -> Arc<BundleGrid> {
    build_bundle_grid(0, 1, 8, &[n], None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // ψ(r) = c r/(1+r) crosses 1 only for c > 1.
    #[test]
    fn guarded_newton_iterates_stay_admissible(amp in 0.0f64..0.3, c in 1.5f64..3.0) {
        let k = CurvatureSpec::parse(&format!("expr:{c}*(1+{amp}*cos(theta))/(1+rho)")).unwrap();
        let sol = solve_direct(&k, ScalarField::constant(circle(32), 0.0), &SolverConfig::default()).unwrap();
        prop_assert!(sol.report.newton.iter().all(|it| it.min_eig > 0.0));
        prop_assert!(sol.report.iterate_checks.violations == 0);
    }

    #[test]
    fn theorem3_solutions_obey_c0_bound(amp in 0.0f64..0.4, lambda in 0.5f64..2.0) {
        let g = circle(32);
        let f = CurvatureSpec::parse(&format!("expr:1+{amp}*cos(theta)")).unwrap();
        let cfg = SolverConfig { lambda, ..SolverConfig::default() };
        let sol = continuity_path_theorem3(&f, &g, &cfg).unwrap();
        let bound = ((1.0 + amp).ln().max(-(1.0 - amp).ln())) / lambda + 10.0 * g.h() * g.h();
        prop_assert!(sol.u.values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn theorem3_unique_from_distinct_starts(amp in 0.0f64..0.3, s in 0.05f64..0.3) {
        let g = circle(16);
        let f = CurvatureSpec::parse(&format!("expr:1+{amp}*cos(theta)")).unwrap();
        let cfg = SolverConfig::default();
        let d = uniqueness_probe(&f, ScalarField::constant(g.clone(), s), ScalarField::constant(g, -s), &cfg).unwrap();
        prop_assert!(d <= 10.0 * cfg.tol, "discrepancy {d:e}");
    }

    /// The Picard sweep only contracts near its trivial fixed point, so a
    /// run may stall; whatever it returns as converged lies in the window.
    #[test]
    fn theorem4_solutions_stay_in_window(c in 0.5f64..2.0, d in 1usize..=2) {
        let g = if d == 1 { circle(32) } else { build_bundle_grid(0, 2, 8, &[8, 16], None).unwrap() };
        let m = d as f64 + 1.0;
        let r = c.powf(-1.0 / (m - 1.0));
        let cfg = SolverConfig { r1: r.min(1.0) * 0.5, r2: r.max(1.0) * 2.0, ..SolverConfig::default() };
        match nagumo_iteration_theorem4(&CurvatureSpec::Constant(c), &g, &cfg) {
            Ok(sol) => {
                let slack = 10.0 * g.h() * g.h();
                prop_assert!(sol.u.values().iter().all(|v| *v >= cfg.r1.ln() - slack && *v <= cfg.r2.ln() + slack));
                prop_assert!(sol.u.values().iter().all(|v| (v - r.ln()).abs() <= 1e-8));
            }
            Err(f) => prop_assert!(
                matches!(f.error, Error::FixedPointStall { .. } | Error::BarrierViolation { .. }),
                "unexpected failure {}",
                f.error
            ),
        }
    }
}

#[test]
fn theorem4_unit_curvature_converges_in_window() {
    let g = build_bundle_grid(0, 2, 8, &[8, 16], None).unwrap();
    let cfg = SolverConfig { r1: 0.5, r2: 2.0, ..SolverConfig::default() };
    let sol = nagumo_iteration_theorem4(&CurvatureSpec::Constant(1.0), &g, &cfg).unwrap();
    assert!(sol.u.values().iter().all(|v| v.abs() <= 1e-8));
}
