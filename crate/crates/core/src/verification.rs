//! Oracles and structure checks: closed-form solutions, radius bisection,
//! an embedded-mesh curvature measurement independent of the PDE operator,
//! commutator identities and refinement studies.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::{CurvatureSpec, EvalPoint};
use crate::curvature_ops::admissible_tensor;
use crate::error::{Error, Result};
use crate::geometry::{
    covariant_gradient, covariant_hessian, covariant_third, homogeneity_violation, radial_identity_check, BundleGrid,
    NodeCoords, ScalarField,
};

/// Errors at or below this are treated as round-off when estimating orders.
pub const EXACT_THRESHOLD: f64 = 1e-12;

/// u = −log(κ∘π)/(m−1) for a base-only κ.
pub fn theorem1_oracle(grid: &Arc<BundleGrid>, kappa: &CurvatureSpec) -> Result<ScalarField> {
    if !kappa.is_base_only() {
        return Err(Error::InvalidInput(format!("kappa must depend on the base point only (got {})", kappa.describe())));
    }
    let m = grid.m() as f64;
    let mut vals = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let k = kappa.eval(&EvalPoint::at_node(grid, i, 1.0));
        if !(k > 0.0) {
            let x = grid.coords(i).x;
            return Err(Error::InvalidInput(format!("kappa must be positive; got {k} at base point ({}, {})", x[0], x[1])));
        }
        vals.push(-k.ln() / (m - 1.0));
    }
    ScalarField::new(grid.clone(), vals)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RadiusReport {
    pub radius: f64,
    /// ψ ≡ 1 on the bracket: every radius works and the midpoint is returned.
    pub degenerate: bool,
    pub psi_a: f64,
    pub psi_b: f64,
    pub psi_root: f64,
    pub iterations: usize,
}

fn radial_point(m: usize, rho: f64) -> EvalPoint {
    EvalPoint { x: [0.0; 2], phi: 0.5 * PI, theta: 0.0, dir: [1.0, 0.0, 0.0], rho, m }
}

/// ψ(r) = r^{m−1}K(r).
pub fn psi(k: &CurvatureSpec, m: usize, r: f64) -> f64 {
    r.powi(m as i32 - 1) * k.eval(&radial_point(m, r))
}

/// Bisection root of ψ(r) = 1 on `[a, b]` to relative 1e-12.
pub fn theorem2_radius(k: &CurvatureSpec, m: usize, bracket: [f64; 2]) -> Result<RadiusReport> {
    let [a, b] = bracket;
    if !(a > 0.0 && b > a && b.is_finite()) {
        return Err(Error::InvalidInput(format!("bracket must satisfy 0 < a < b (got [{a}, {b}])")));
    }
    if m < 2 {
        return Err(Error::InvalidInput(format!("fiber rank m must be at least 2 (got {m})")));
    }
    let (pa, pb) = (psi(k, m, a), psi(k, m, b));
    let samples = (0..=8).map(|i| a * (b / a).powf(i as f64 / 8.0));
    if samples.clone().all(|r| (psi(k, m, r) - 1.0).abs() <= 1e-12) {
        let mid = 0.5 * (a + b);
        return Ok(RadiusReport { radius: mid, degenerate: true, psi_a: pa, psi_b: pb, psi_root: psi(k, m, mid), iterations: 0 });
    }
    let (fa, fb) = (pa - 1.0, pb - 1.0);
    if fa == 0.0 {
        return Ok(RadiusReport { radius: a, degenerate: false, psi_a: pa, psi_b: pb, psi_root: pa, iterations: 0 });
    }
    if fb == 0.0 {
        return Ok(RadiusReport { radius: b, degenerate: false, psi_a: pa, psi_b: pb, psi_root: pb, iterations: 0 });
    }
    if !(fa.signum() != fb.signum()) {
        return Err(Error::NoBracket { a, b, fa, fb });
    }
    let (mut lo, mut hi, mut flo) = (a, b, fa);
    let mut iterations = 0;
    while hi - lo > 1e-12 * 0.5 * (hi + lo) && iterations < 200 {
        let mid = 0.5 * (lo + hi);
        let fm = psi(k, m, mid) - 1.0;
        iterations += 1;
        if fm == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    Ok(RadiusReport { radius: r, degenerate: false, psi_a: pa, psi_b: pb, psi_root: psi(k, m, r), iterations })
}

/// Radial graph e^{u(ξ)}ξ over one fiber, with per-vertex curvature.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EmbeddedMesh {
    pub base_node: usize,
    pub fiber_dim: usize,
    /// Ambient positions (z = 0 for curves).
    pub vertices: Vec<[f64; 3]>,
    /// Triangles for surfaces; empty for curves (the polyline closes on itself).
    pub faces: Vec<[usize; 3]>,
    /// Menger curvature (d = 1) or angle defect over mixed area (d = 2).
    pub curvature: Vec<f64>,
    /// Vertices whose measured curvature is unreliable (rows touching a pole cap).
    pub flagged: Vec<bool>,
    /// Σ angle defects; 4π for a closed genus-0 surface.
    pub total_defect: Option<f64>,
}

impl EmbeddedMesh {
    /// Every undirected edge is used by exactly two faces with opposite
    /// orientations.
    pub fn is_closed_oriented(&self) -> bool {
        if self.fiber_dim == 1 {
            return self.vertices.len() >= 3;
        }
        let mut count: BTreeMap<(usize, usize), i32> = BTreeMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *count.entry((a, b)).or_default() += 1;
            }
        }
        count.iter().all(|(&(a, b), &c)| c == 1 && count.get(&(b, a)) == Some(&1))
    }

    /// Sum over faces of (p1−p0)×(p2−p0)·centroid is positive for outward
    /// orientation; returns the smallest per-face value.
    pub fn min_orientation(&self) -> f64 {
        if self.fiber_dim == 1 {
            let n = self.vertices.len();
            return (0..n)
                .map(|i| {
                    let (p, q) = (self.vertices[i], self.vertices[(i + 1) % n]);
                    p[0] * q[1] - p[1] * q[0]
                })
                .fold(f64::INFINITY, f64::min);
        }
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                let nrm = cross(sub(b, a), sub(c, a));
                let cen = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0];
                dot(nrm, cen)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Triangles of the structured latitude–longitude surface: two per quad
/// between neighbouring rows and a fan over each polar ring, all
/// counter-clockwise seen from outside.
pub fn sphere_faces(n_phi: usize, n_theta: usize) -> Vec<[usize; 3]> {
    let idx = |j: usize, k: usize| j * n_theta + k % n_theta;
    let mut faces = Vec::with_capacity(2 * n_phi * n_theta);
    for k in 1..n_theta - 1 {
        faces.push([idx(0, 0), idx(0, k), idx(0, k + 1)]);
    }
    for j in 0..n_phi - 1 {
        for k in 0..n_theta {
            faces.push([idx(j, k), idx(j + 1, k), idx(j + 1, k + 1)]);
            faces.push([idx(j, k), idx(j + 1, k + 1), idx(j, k + 1)]);
        }
    }
    let last = n_phi - 1;
    for k in 1..n_theta - 1 {
        faces.push([idx(last, 0), idx(last, k + 1), idx(last, k)]);
    }
    faces
}

/// Embedded radial graph over the fibers at `base_nodes`, with discrete
/// curvature computed from the geometry of the mesh alone.
pub fn embed_and_measure(u: &ScalarField, base_nodes: &[usize]) -> Result<Vec<EmbeddedMesh>> {
    let g = u.grid();
    let s = g.fiber();
    let nf = g.fiber_len();
    let mut out = Vec::with_capacity(base_nodes.len());
    for &b in base_nodes {
        if b >= g.base().len() {
            return Err(Error::InvalidInput(format!("base node {b} out of range (base has {} nodes)", g.base().len())));
        }
        let vertices: Vec<[f64; 3]> = (0..nf)
            .map(|f| {
                let r = u.values()[g.node(b, f)].exp();
                s.point(f).map(|c| r * c)
            })
            .collect();
        let mesh = if g.d() == 1 {
            let curvature = menger(&vertices)?;
            EmbeddedMesh {
                base_node: b,
                fiber_dim: 1,
                vertices,
                faces: vec![],
                curvature,
                flagged: vec![false; nf],
                total_defect: None,
            }
        } else {
            let faces = sphere_faces(s.n_phi(), s.n_theta());
            let (curvature, total) = angle_defect(&vertices, &faces)?;
            let flagged = (0..nf).map(|f| s.is_pole_adjacent(f)).collect();
            EmbeddedMesh { base_node: b, fiber_dim: 2, vertices, faces, curvature, flagged, total_defect: Some(total) }
        };
        out.push(mesh);
    }
    Ok(out)
}

/// Signed circumscribed-circle curvature of a closed counter-clockwise polyline.
fn menger(v: &[[f64; 3]]) -> Result<Vec<f64>> {
    let n = v.len();
    let mut bad = Vec::new();
    let k: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b, c) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
            let (ab, bc, ca) = (sub(b, a), sub(c, b), sub(a, c));
            let cr = ab[0] * bc[1] - ab[1] * bc[0];
            let denom = norm(ab) * norm(bc) * norm(ca);
            if cr.abs() <= 1e-14 * denom.max(f64::MIN_POSITIVE).powf(2.0 / 3.0) || denom == 0.0 {
                bad.push(i);
                return f64::NAN;
            }
            2.0 * cr / denom
        })
        .collect();
    if bad.is_empty() {
        Ok(k)
    } else {
        Err(Error::DegenerateMesh(bad))
    }
}

fn angle_at(p: [f64; 3], q: [f64; 3], r: [f64; 3]) -> f64 {
    let (a, b) = (sub(q, p), sub(r, p));
    norm(cross(a, b)).atan2(dot(a, b))
}

/// Angle defect divided by mixed Voronoi area at each vertex.
fn angle_defect(v: &[[f64; 3]], faces: &[[usize; 3]]) -> Result<(Vec<f64>, f64)> {
    let n = v.len();
    let mut angle_sum = vec![0.0; n];
    let mut area = vec![0.0; n];
    let mut bad = Vec::new();
    for (fi, f) in faces.iter().enumerate() {
        let p = f.map(|i| v[i]);
        let tri = 0.5 * norm(cross(sub(p[1], p[0]), sub(p[2], p[0])));
        let scale = dot(sub(p[1], p[0]), sub(p[1], p[0])).max(dot(sub(p[2], p[0]), sub(p[2], p[0])));
        if !(tri > 1e-14 * scale) {
            bad.push(fi);
            continue;
        }
        let ang = [angle_at(p[0], p[1], p[2]), angle_at(p[1], p[2], p[0]), angle_at(p[2], p[0], p[1])];
        let obtuse = ang.iter().position(|&a| a > 0.5 * PI);
        for c in 0..3 {
            angle_sum[f[c]] += ang[c];
            area[f[c]] += match obtuse {
                None => {
                    // Voronoi region: ⅛ Σ |e|² cot(opposite angle) over the two incident edges.
                    let (nx, pv) = ((c + 1) % 3, (c + 2) % 3);
                    let e1 = sub(p[nx], p[c]);
                    let e2 = sub(p[pv], p[c]);
                    (dot(e1, e1) / ang[pv].tan() + dot(e2, e2) / ang[nx].tan()) / 8.0
                }
                Some(o) if o == c => tri / 2.0,
                Some(_) => tri / 4.0,
            };
        }
    }
    if !bad.is_empty() {
        return Err(Error::DegenerateMesh(bad));
    }
    let defect: Vec<f64> = angle_sum.iter().map(|s| 2.0 * PI - s).collect();
    let total = defect.iter().sum();
    Ok((defect.iter().zip(&area).map(|(d, a)| d / a).collect(), total))
}

/// Largest relative deviation of the measured curvature of one fiber's mesh
/// from K at the embedded points, skipping flagged vertices. Returns the
/// deviation and the number of vertices skipped.
pub fn curvature_deviation(u: &ScalarField, k: &CurvatureSpec, mesh: &EmbeddedMesh) -> (f64, usize) {
    let g = u.grid();
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for (f, (&kk, &fl)) in mesh.curvature.iter().zip(&mesh.flagged).enumerate() {
        if fl {
            skipped += 1;
            continue;
        }
        let node = g.node(mesh.base_node, f);
        let target = k.eval(&EvalPoint::at_node(g, node, u.values()[node].exp()));
        worst = worst.max((kk - target).abs() / target);
    }
    (worst, skipped)
}

/// Signed eigenvalue range of the horizontal block of G′ and the largest
/// horizontal gradient; a diagnostic for the (non-)convexity of the graph.
pub fn horizontal_signature(u: &ScalarField) -> (f64, f64, f64) {
    let g = admissible_tensor(u);
    let fd = covariant_gradient(u);
    if u.grid().n() == 0 {
        return (f64::NAN, f64::NAN, 0.0);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for blk in &g.horizontal {
        let a = blk.a;
        let (l1, l2) = if blk.size == 1 {
            (a[0][0], a[0][0])
        } else {
            let tr = a[0][0] + a[1][1];
            let disc = ((a[0][0] - a[1][1]).powi(2) + 4.0 * a[0][1] * a[1][0]).max(0.0).sqrt();
            (0.5 * (tr - disc), 0.5 * (tr + disc))
        };
        lo = lo.min(l1);
        hi = hi.max(l2);
    }
    let gmax = (0..u.grid().len()).map(|i| fd.grad_sq_h(i).sqrt()).fold(0.0, f64::max);
    (lo, hi, gmax)
}

/// Manufactured solution u* (0.1 cos θ on circles, 0.1 cos φ on spheres) and
/// a curvature whose exact solution it is: K(ρξ) = G*(ξ)(e^{u*(ξ)}/ρ)^m,
/// where G* is the closed-form vertical curvature of the graph of u*.
pub fn manufactured_problem(d: usize) -> (CurvatureSpec, fn(&NodeCoords) -> f64) {
    fn u1(c: &NodeCoords) -> f64 {
        0.1 * c.theta.cos()
    }
    fn u2(c: &NodeCoords) -> f64 {
        0.1 * c.phi.cos()
    }
    if d == 1 {
        let k = CurvatureSpec::custom(|p: &EvalPoint| {
            let (s, c) = p.theta.sin_cos();
            let us = 0.1 * c;
            let w = 1.0 + 0.01 * s * s;
            let g = w.powf(-1.5) * (-us).exp() * (w + 0.1 * c);
            g * (us.exp() / p.rho).powi(2)
        });
        (k, u1)
    } else {
        let k = CurvatureSpec::custom(|p: &EvalPoint| {
            let (s, c) = p.phi.sin_cos();
            let us = 0.1 * c;
            let w = 1.0 + 0.01 * s * s;
            let g = w.powi(-2) * (-2.0 * us).exp() * (w + 0.1 * c) * (1.0 + 0.1 * c);
            g * (us.exp() / p.rho).powi(3)
        });
        (k, u2)
    }
}

/// Seeded smooth test fields: cubic polynomials in the ambient fiber
/// coordinates plus base Fourier modes.
pub fn test_fields(grid: &Arc<BundleGrid>, seed: u64, count: usize) -> Vec<ScalarField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c: Vec<f64> = (0..20).map(|_| rng.random_range(-0.5..0.5)).collect();
            let base: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            let phase: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let n = grid.n();
            ScalarField::from_fn(grid.clone(), |nc| {
                let [x, y, z] = nc.dir;
                let mono = [
                    x,
                    y,
                    z,
                    x * x,
                    y * y,
                    z * z,
                    x * y,
                    y * z,
                    z * x,
                    x * x * x,
                    y * y * y,
                    z * z * z,
                    x * y * z,
                    x * x * y,
                    y * y * z,
                    z * z * x,
                ];
                let mut v: f64 = mono.iter().zip(&c).map(|(m, c)| m * c).sum();
                if n >= 1 {
                    v += base[0] * (nc.x[0] + phase[0]).sin() + base[1] * x * nc.x[0].cos();
                }
                if n >= 2 {
                    v += base[2] * (nc.x[1] + phase[1]).cos() + base[3] * y * (nc.x[0] + nc.x[1]).sin();
                }
                v
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct IdentityReport {
    pub h: f64,
    /// max |T_abc − T_bac − (δ_ac D_b u − δ_bc D_a u)| over vertical triples,
    /// on the middle half of the latitude rows (d = 2).
    pub curvature_commutator: f64,
    /// max |D_iα u − D_αi u|.
    pub mixed_commutator: f64,
    /// max |D_α u(ρ = s) − s⁻¹ D_α u(ρ = 1)| for s ∈ {½, 2}.
    pub homogeneity: f64,
    /// Radial identities on the unit shell.
    pub radial_identity: f64,
    pub per_field: Vec<[f64; 4]>,
}

/// Vertical Ricci-identity residual of one field.
fn curvature_commutator(u: &ScalarField) -> f64 {
    let g = u.grid();
    if g.d() != 2 {
        return 0.0;
    }
    let n = g.n();
    let t = covariant_third(u);
    let grad = covariant_gradient(u).grad;
    // Rows with π/4 < φ < 3π/4; the edge rows sit h/2 inside the band at
    // every resolution divisible by 4, so the maxima are comparable.
    let band: Vec<usize> = (0..g.len())
        .filter(|&i| {
            let p = g.coords(i).phi;
            p > PI / 4.0 && p < 3.0 * PI / 4.0
        })
        .collect();
    let mut worst: f64 = 0.0;
    for a in n..n + 2 {
        for b in n..n + 2 {
            for c in n..n + 2 {
                let (tabc, tbac) = (t.get(a, b, c), t.get(b, a, c));
                for &i in &band {
                    let expect = f64::from(u8::from(a == c)) * grad[b][i] - f64::from(u8::from(b == c)) * grad[a][i];
                    worst = worst.max((tabc[i] - tbac[i] - expect).abs());
                }
            }
        }
    }
    worst
}

fn mixed_commutator(u: &ScalarField) -> f64 {
    let g = u.grid();
    let n = g.n();
    let fd = covariant_hessian(u);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for al in n..n + g.d() {
            for (x, y) in fd.hess[i][al].iter().zip(&fd.hess[al][i]) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

/// Structure identities on `count` seeded test fields.
pub fn structure_identity_suite(grid: &Arc<BundleGrid>, seed: u64, count: usize) -> IdentityReport {
    structure_identities_of(grid, &test_fields(grid, seed, count))
}

pub fn structure_identities_of(grid: &Arc<BundleGrid>, fields: &[ScalarField]) -> IdentityReport {
    let per_field: Vec<[f64; 4]> = std::thread::scope(|sc| {
        let hs: Vec<_> = fields
            .iter()
            .map(|u| {
                sc.spawn(move || {
                    [
                        curvature_commutator(u),
                        mixed_commutator(u),
                        homogeneity_violation(u, 2.0).max(homogeneity_violation(u, 0.5)),
                        radial_identity_check(u, 1.0),
                    ]
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("identity worker")).collect()
    });
    let col = |k: usize| per_field.iter().map(|r| r[k]).fold(0.0, f64::max);
    IdentityReport {
        h: grid.h(),
        curvature_commutator: col(0),
        mixed_commutator: col(1),
        homogeneity: col(2),
        radial_identity: col(3),
        per_field,
    }
}

/// Error sequence of one metric under refinement.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricOrder {
    pub errors: Vec<f64>,
    /// log(e_k / e_{k+1}) / log(h_k / h_{k+1}) per consecutive pair.
    pub orders: Vec<f64>,
    /// Every error is at round-off level.
    pub exact: bool,
}

impl MetricOrder {
    pub fn from_errors(errors: Vec<f64>, hs: &[f64]) -> Self {
        let exact = errors.iter().all(|&e| e <= EXACT_THRESHOLD);
        let orders = errors
            .windows(2)
            .zip(hs.windows(2))
            .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
            .collect();
        MetricOrder { errors, orders, exact }
    }

    /// Order between the two finest levels.
    pub fn observed(&self) -> Option<f64> {
        if self.exact {
            None
        } else {
            self.orders.last().copied()
        }
    }

    /// Every pairwise order within `[target − tol, target + tol]`, or exact.
    pub fn order_within(&self, target: f64, tol: f64) -> bool {
        self.exact || (!self.orders.is_empty() && self.orders.iter().all(|o| (o - target).abs() <= tol))
    }

    pub fn order_at_least(&self, min: f64) -> bool {
        self.exact || (!self.orders.is_empty() && self.orders.iter().all(|&o| o >= min))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceReport {
    pub h: Vec<f64>,
    pub resolutions: Vec<(usize, Vec<usize>)>,
    pub metrics: BTreeMap<String, MetricOrder>,
}

/// Output of one level of a convergence study.
pub struct LevelResult {
    pub u: ScalarField,
    /// Closed-form solution on the same grid, when known.
    pub exact: Option<ScalarField>,
    /// Extra error-like quantities (residual norms, identity violations).
    pub extra: BTreeMap<String, f64>,
}

/// Injects a fine-grid field into a grid coarser by a factor 1 or 2 per axis;
/// latitude rows (cell-centred) are averaged pairwise.
pub fn restrict(fine: &ScalarField, coarse: &Arc<BundleGrid>) -> Result<ScalarField> {
    let fg = fine.grid();
    let (fb, cb) = (fg.base(), coarse.base());
    let (fs, cs) = (fg.fiber(), coarse.fiber());
    if fg.n() != coarse.n() || fg.d() != coarse.d() {
        return Err(Error::InvalidInput("restriction between grids of different dimensions".into()));
    }
    let ratio = |f: usize, c: usize| -> Result<usize> {
        if f == c || f == 2 * c {
            Ok(f / c)
        } else {
            Err(Error::InvalidInput(format!("resolutions {c} -> {f} are not a factor-2 refinement")))
        }
    };
    let rb = if fg.n() > 0 { ratio(fb.res(), cb.res())? } else { 1 };
    let rt = ratio(fs.n_theta(), cs.n_theta())?;
    let rp = ratio(fs.n_phi(), cs.n_phi())?;
    let fine_base = |b: usize| -> usize {
        match fg.n() {
            0 => 0,
            1 => rb * b,
            _ => {
                let (i, j) = (b / cb.res(), b % cb.res());
                rb * i * fb.res() + rb * j
            }
        }
    };
    let vals = (0..coarse.len())
        .map(|node| {
            let (b, f) = coarse.split(node);
            let (j, k) = cs.row_col(f);
            let fbn = fine_base(b);
            let at = |jj: usize| fine.values()[fg.node(fbn, fs.index(jj, rt * k))];
            if rp == 2 {
                0.5 * (at(2 * j) + at(2 * j + 1))
            } else {
                at(j)
            }
        })
        .collect();
    ScalarField::new(coarse.clone(), vals)
}

/// Solves on each grid and estimates orders: against the closed form when
/// every level supplies one, otherwise from successive differences
/// ‖u_k − R u_{k+1}‖_∞.
pub fn convergence_study(
    grids: &[Arc<BundleGrid>],
    mut solve: impl FnMut(&Arc<BundleGrid>) -> Result<LevelResult>,
) -> Result<ConvergenceReport> {
    if grids.len() < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 resolutions, got {}", grids.len())));
    }
    for w in grids.windows(2) {
        let r = w[0].h() / w[1].h();
        if (r - 2.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("resolutions must halve h at each level (ratio {r})")));
        }
    }
    let levels: Vec<LevelResult> = grids.iter().map(&mut solve).collect::<Result<_>>()?;
    let hs: Vec<f64> = grids.iter().map(|g| g.h()).collect();
    let mut metrics = BTreeMap::new();
    if levels.iter().all(|l| l.exact.is_some()) {
        let e = levels.iter().map(|l| l.u.max_abs_diff(l.exact.as_ref().unwrap())).collect();
        metrics.insert("solution_error".into(), MetricOrder::from_errors(e, &hs));
    } else {
        let mut e = Vec::new();
        for k in 0..levels.len() - 1 {
            let r = restrict(&levels[k + 1].u, &grids[k])?;
            e.push(levels[k].u.max_abs_diff(&r));
        }
        metrics.insert("self_difference".into(), MetricOrder::from_errors(e, &hs[..hs.len() - 1]));
    }
    let keys: Vec<String> = levels[0].extra.keys().cloned().collect();
    for key in keys {
        let e: Vec<f64> = levels.iter().map(|l| l.extra.get(&key).copied().unwrap_or(f64::NAN)).collect();
        metrics.insert(key, MetricOrder::from_errors(e, &hs));
    }
    let resolutions = grids
        .iter()
        .map(|g| {
            let f = g.fiber();
            (g.base().res(), if g.d() == 1 { vec![f.n_theta()] } else { vec![f.n_phi(), f.n_theta()] })
        })
        .collect();
    Ok(ConvergenceReport { h: hs, resolutions, metrics })
}

/// Structure identities over a refinement sequence, as orders per metric.
pub fn structure_identity_study(grids: &[Arc<BundleGrid>], seed: u64, count: usize) -> BTreeMap<String, MetricOrder> {
    let reps: Vec<IdentityReport> = grids.iter().map(|g| structure_identity_suite(g, seed, count)).collect();
    let hs: Vec<f64> = reps.iter().map(|r| r.h).collect();
    let mut out = BTreeMap::new();
    let names = ["curvature_commutator", "mixed_commutator", "homogeneity", "radial_identity"];
    for (k, name) in names.iter().enumerate() {
        // Per-field orders: a metric passes only if every field decays.
        let e: Vec<f64> = reps
            .iter()
            .map(|r| match k {
                0 => r.curvature_commutator,
                1 => r.mixed_commutator,
                2 => r.homogeneity,
                _ => r.radial_identity,
            })
            .collect();
        let mut mo = MetricOrder::from_errors(e, &hs);
        if !mo.exact {
            for f in 0..count {
                let ef: Vec<f64> = reps.iter().map(|r| r.per_field[f][k]).collect();
                let fo = MetricOrder::from_errors(ef, &hs);
                if !fo.exact {
                    for (o, fo) in mo.orders.iter_mut().zip(fo.orders) {
                        *o = o.min(fo);
                    }
                }
            }
        }
        out.insert(name.to_string(), mo);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature_ops::residual_direct;
    use crate::geometry::build_bundle_grid;

    #[test]
    fn oracle_constant_four() {
        let g = build_bundle_grid(0, 1, 8, &[16], None).unwrap();
        let u = theorem1_oracle(&g, &CurvatureSpec::Constant(4.0)).unwrap();
        assert!(u.values().iter().all(|v| (v + 4f64.ln()).abs() < 1e-15));
        assert!(theorem1_oracle(&g, &CurvatureSpec::Constant(-1.0)).is_err());
    }

    #[test]
    fn oracle_base_dependent_m3() {
        let g = build_bundle_grid(1, 2, 16, &[8, 16], None).unwrap();
        let k = CurvatureSpec::parse("fiber:2+cos(x)").unwrap();
        let u = theorem1_oracle(&g, &k).unwrap();
        for i in 0..g.len() {
            let x = g.coords(i).x[0];
            assert!((u.values()[i] + 0.5 * (2.0 + x.cos()).ln()).abs() < 1e-15);
        }
        assert!(residual_direct(&u, &k).iter().all(|r| r.abs() < EXACT_THRESHOLD));
    }

    #[test]
    fn radius_of_constant_and_rational() {
        let r = theorem2_radius(&CurvatureSpec::Constant(4.0), 2, [0.01, 10.0]).unwrap();
        assert!((r.radius - 0.25).abs() <= 1e-11 * 0.25);
        let k = CurvatureSpec::parse("radial:2/(1+rho)").unwrap();
        let r = theorem2_radius(&k, 2, [0.1, 10.0]).unwrap();
        assert!((r.radius - 1.0).abs() <= 1e-11);
        assert!(!r.degenerate);
    }

    #[test]
    fn radius_degenerate_and_unbracketed() {
        let k = CurvatureSpec::parse("radial:rho^(-2)").unwrap();
        let r = theorem2_radius(&k, 3, [0.5, 2.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.radius, 1.25);
        let e = theorem2_radius(&CurvatureSpec::Constant(4.0), 2, [1.0, 2.0]).unwrap_err();
        assert!(matches!(e, Error::NoBracket { .. }));
    }

    #[test]
    fn circle_of_radius_two() {
        let g = build_bundle_grid(0, 1, 8, &[64], None).unwrap();
        let u = ScalarField::constant(g, 2f64.ln());
        let m = &embed_and_measure(&u, &[0]).unwrap()[0];
        assert!(m.curvature.iter().all(|k| (k - 0.5).abs() < 1e-12));
        assert!(m.min_orientation() > 0.0);
    }

    #[test]
    fn unit_sphere_mesh() {
        let g = build_bundle_grid(0, 2, 8, &[32, 64], None).unwrap();
        let u = ScalarField::constant(g, 0.0);
        let m = &embed_and_measure(&u, &[0]).unwrap()[0];
        assert!(m.is_closed_oriented());
        assert!(m.min_orientation() > 0.0);
        let v = m.vertices.len();
        let e = m.faces.len() * 3 / 2;
        assert_eq!(v + m.faces.len() - e, 2);
        assert!((m.total_defect.unwrap() - 4.0 * PI).abs() < 1e-10);
        for (k, &fl) in m.curvature.iter().zip(&m.flagged) {
            if !fl {
                assert!((k - 1.0).abs() < 0.05, "{k}");
            }
        }
    }

    #[test]
    fn constant_field_identities_vanish() {
        let g = build_bundle_grid(1, 2, 8, &[8, 16], None).unwrap();
        let r = structure_identities_of(&g, &[ScalarField::constant(g.clone(), 0.7)]);
        for v in [r.curvature_commutator, r.mixed_commutator, r.homogeneity, r.radial_identity] {
            assert!(v <= EXACT_THRESHOLD, "{v}");
        }
    }

    #[test]
    fn restriction_of_smooth_field() {
        let c = build_bundle_grid(1, 2, 8, &[8, 16], None).unwrap();
        let f = build_bundle_grid(1, 2, 16, &[16, 32], None).unwrap();
        let func = |n: &NodeCoords| n.x[0].sin() + n.dir[2];
        let r = restrict(&ScalarField::from_fn(f, func), &c).unwrap();
        let exact = ScalarField::from_fn(c, func);
        assert!(r.max_abs_diff(&exact) < 0.02);
    }

    #[test]
    fn manufactured_residual_is_second_order() {
        let mut errs = vec![];
        for n in [32, 64, 128] {
            let g = build_bundle_grid(0, 1, 8, &[n], None).unwrap();
            let (k, us) = manufactured_problem(1);
            let u = ScalarField::from_fn(g, us);
            errs.push(residual_direct(&u, &k).iter().fold(0.0f64, |a, b| a.max(b.abs())));
        }
        let o = (errs[1] / errs[2]).log2();
        assert!((o - 2.0).abs() < 0.2, "{errs:?}");
    }
}
