//! Problem fixtures shared by the benchmarks.

use std::sync::Arc;

use radgraph::verification::{manufactured_problem, test_fields};
use radgraph::{build_bundle_grid, BundleGrid, CurvatureSpec, ScalarField};

/// Circle fiber over a point (`d = 1`) or a sphere fiber (`d = 2`, `res` is N_phi).
pub fn fiber_grid(d: usize, res: usize) -> Arc<BundleGrid> {
    let fr = if d == 1 { vec![res] } else { vec![res, 2 * res] };
    build_bundle_grid(0, d, 8, &fr, None).expect("fixture grid")
}

/// T^1 x S^1 product used by the coupled solvers.
pub fn product_grid(base: usize, fiber: usize) -> Arc<BundleGrid> {
    build_bundle_grid(1, 1, base, &[fiber], None).expect("fixture grid")
}

/// Manufactured curvature for the fiber dimension of `grid`.
pub fn manufactured(grid: &BundleGrid) -> CurvatureSpec {
    manufactured_problem(grid.d()).0
}

/// A seeded admissible field, scaled down so the blocks stay positive.
pub fn smooth_field(grid: &Arc<BundleGrid>) -> ScalarField {
    let u = test_fields(grid, 42, 1).remove(0);
    u.with_values(u.values().iter().map(|v| 0.05 * v).collect())
}
