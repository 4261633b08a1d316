//! Discretization of the sphere bundle Σ = T^n × S^d and covariant
//! difference operators in the orthonormal frame {e_i, e_α}.
//!
//! Nodes are ordered base-major: `node = base_index * fiber_len + fiber_index`.
//! Frame indices `0..n` are horizontal, `n..n+d` vertical. On the 2-sphere the
//! vertical frame is (e_φ, e_θ) = (∂_φ, ∂_θ / sin φ).

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::sparse::Csr;

/// Uniform periodic grid on the flat torus (R / 2πZ)^n, or a single point.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseGrid {
    dim: usize,
    res: usize,
}

impl BaseGrid {
    pub fn new(dim: usize, res: usize) -> Result<Self> {
        if dim > 2 {
            return Err(Error::InvalidInput(format!("base dimension {dim} not in {{0, 1, 2}}")));
        }
        if dim > 0 && res < 8 {
            return Err(Error::InvalidInput(format!("base resolution {res} below 8")));
        }
        Ok(BaseGrid { dim, res: if dim == 0 { 1 } else { res } })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn len(&self) -> usize {
        self.res.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Spacing per axis; zero for the point base.
    pub fn h(&self) -> f64 {
        if self.dim == 0 {
            0.0
        } else {
            2.0 * PI / self.res as f64
        }
    }

    pub fn weight(&self) -> f64 {
        self.h().powi(self.dim as i32).max(if self.dim == 0 { 1.0 } else { 0.0 })
    }

    pub fn measure(&self) -> f64 {
        (2.0 * PI).powi(self.dim as i32)
    }

    fn index(&self, b: usize) -> [usize; 2] {
        match self.dim {
            0 => [0, 0],
            1 => [b, 0],
            _ => [b / self.res, b % self.res],
        }
    }

    pub fn coords(&self, b: usize) -> [f64; 2] {
        let [i, j] = self.index(b);
        let h = self.h();
        match self.dim {
            0 => [0.0, 0.0],
            1 => [i as f64 * h, 0.0],
            _ => [i as f64 * h, j as f64 * h],
        }
    }

    /// Periodic neighbour of `b` shifted by `off` along `axis`.
    pub fn shift(&self, b: usize, axis: usize, off: isize) -> usize {
        let mut idx = self.index(b);
        let r = self.res as isize;
        idx[axis] = (idx[axis] as isize + off).rem_euclid(r) as usize;
        match self.dim {
            1 => idx[0],
            _ => idx[0] * self.res + idx[1],
        }
    }
}

/// Unit circle (d = 1) or latitude–longitude grid on the unit 2-sphere (d = 2)
/// with rows at φ_j = (j + ½)π / N_φ, so no node sits on a pole.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereGrid {
    dim: usize,
    n_phi: usize,
    n_theta: usize,
    weights: Vec<f64>,
}

impl SphereGrid {
    /// `res` is `[N]` for the circle and `[N_φ, N_θ]` (or `[N_φ]`, meaning
    /// N_θ = 2 N_φ) for the 2-sphere.
    pub fn new(dim: usize, res: &[usize]) -> Result<Self> {
        let (n_phi, n_theta) = match (dim, res) {
            (1, [n]) => (1, *n),
            (2, [n]) => (*n, 2 * *n),
            (2, [np, nt]) => (*np, *nt),
            (1 | 2, _) => {
                return Err(Error::InvalidInput(format!("fiber resolution {res:?} does not fit fiber dimension {dim}")))
            }
            _ => return Err(Error::InvalidInput(format!("fiber dimension {dim} not in {{1, 2}}"))),
        };
        if n_theta < 8 || (dim == 2 && n_phi < 8) {
            return Err(Error::InvalidInput(format!("fiber resolution {res:?} below 8 per axis")));
        }
        if dim == 2 && n_theta % 2 != 0 {
            return Err(Error::InvalidInput(format!("longitude count {n_theta} must be even for pole reflection")));
        }
        let mut g = SphereGrid { dim, n_phi, n_theta, weights: vec![] };
        let ht = g.h_theta();
        g.weights = if dim == 1 {
            vec![ht; n_theta]
        } else {
            let hp = g.h_phi();
            (0..n_phi)
                .flat_map(|j| {
                    let w = 2.0 * g.phi(j).sin() * (0.5 * hp).sin() * ht;
                    std::iter::repeat_n(w, n_theta)
                })
                .collect()
        };
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_phi(&self) -> usize {
        self.n_phi
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn len(&self) -> usize {
        self.n_phi * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h_theta(&self) -> f64 {
        2.0 * PI / self.n_theta as f64
    }

    pub fn h_phi(&self) -> f64 {
        if self.dim == 1 {
            0.0
        } else {
            PI / self.n_phi as f64
        }
    }

    pub fn h(&self) -> f64 {
        self.h_theta().max(self.h_phi())
    }

    pub fn measure(&self) -> f64 {
        if self.dim == 1 {
            2.0 * PI
        } else {
            4.0 * PI
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn phi(&self, j: usize) -> f64 {
        if self.dim == 1 {
            0.5 * PI
        } else {
            (j as f64 + 0.5) * self.h_phi()
        }
    }

    pub fn theta(&self, k: usize) -> f64 {
        k as f64 * self.h_theta()
    }

    pub fn index(&self, j: usize, k: usize) -> usize {
        j * self.n_theta + k
    }

    pub fn row_col(&self, f: usize) -> (usize, usize) {
        (f / self.n_theta, f % self.n_theta)
    }

    pub fn angles(&self, f: usize) -> (f64, f64) {
        let (j, k) = self.row_col(f);
        (self.phi(j), self.theta(k))
    }

    /// Unit vector of node `f` in the ambient fiber R^{d+1} (padded to R^3).
    pub fn point(&self, f: usize) -> [f64; 3] {
        let (p, t) = self.angles(f);
        [p.sin() * t.cos(), p.sin() * t.sin(), p.cos()]
    }

    /// Orthonormal vertical frame at node `f`: [e_θ] or [e_φ, e_θ].
    pub fn frame(&self, f: usize) -> Vec<[f64; 3]> {
        let (p, t) = self.angles(f);
        let e_theta = [-t.sin(), t.cos(), 0.0];
        if self.dim == 1 {
            vec![e_theta]
        } else {
            vec![[p.cos() * t.cos(), p.cos() * t.sin(), -p.sin()], e_theta]
        }
    }

    /// Resolves a possibly out-of-range row through the pole. Returns the
    /// physical node and whether the frame was reversed (pole crossed).
    pub fn neighbor(&self, j: usize, k: usize, dj: isize, dk: isize) -> (usize, bool) {
        let nt = self.n_theta as isize;
        let mut jj = j as isize + dj;
        let mut kk = k as isize + dk;
        let mut crossed = false;
        if jj < 0 {
            jj = -1 - jj;
            kk += nt / 2;
            crossed = true;
        } else if jj >= self.n_phi as isize {
            jj = 2 * self.n_phi as isize - 1 - jj;
            kk += nt / 2;
            crossed = true;
        }
        (self.index(jj as usize, kk.rem_euclid(nt) as usize), crossed)
    }

    /// Rows whose stencils reach across a pole.
    pub fn is_pole_adjacent(&self, f: usize) -> bool {
        self.dim == 2 && {
            let (j, _) = self.row_col(f);
            j == 0 || j + 1 == self.n_phi
        }
    }
}

/// Connection 1-form sampled per base node: one antisymmetric 3×3 matrix
/// A_i[β][α] = Γ^β_{iα} per base axis, acting on the ambient fiber coordinates.
pub type ConnectionSample = Vec<[[f64; 3]; 3]>;

/// Position of a node on Σ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeCoords {
    pub x: [f64; 2],
    pub phi: f64,
    pub theta: f64,
    pub dir: [f64; 3],
}

#[derive(Debug)]
pub struct BundleGrid {
    base: BaseGrid,
    fiber: SphereGrid,
    connection: Option<Vec<ConnectionSample>>,
    ops: OnceLock<DiffOps>,
}

/// Builds Σ = T^n × S^d. `connection`, if given, maps base coordinates to the
/// per-axis connection matrices; each must be antisymmetric within 1e-10.
pub fn build_bundle_grid(
    n: usize,
    d: usize,
    base_res: usize,
    fiber_res: &[usize],
    connection: Option<&dyn Fn([f64; 2]) -> ConnectionSample>,
) -> Result<Arc<BundleGrid>> {
    let base = BaseGrid::new(n, base_res)?;
    let fiber = SphereGrid::new(d, fiber_res)?;
    let connection = match connection {
        None => None,
        Some(sampler) => {
            let mut samples = Vec::with_capacity(base.len());
            for b in 0..base.len() {
                let s = sampler(base.coords(b));
                if s.len() != n {
                    return Err(Error::InvalidInput(format!(
                        "connection sampler returned {} matrices, expected {n}",
                        s.len()
                    )));
                }
                for (i, a) in s.iter().enumerate() {
                    for r in 0..3 {
                        for c in 0..3 {
                            if (a[r][c] + a[c][r]).abs() > 1e-10 {
                                return Err(Error::InvalidInput(format!(
                                    "connection matrix for axis {i} at base node {b} is not antisymmetric \
                                     (entries ({r},{c}) and ({c},{r}))"
                                )));
                            }
                        }
                    }
                }
                samples.push(s);
            }
            if samples.iter().flatten().flatten().flatten().all(|v| *v == 0.0) {
                None
            } else {
                Some(samples)
            }
        }
    };
    Ok(Arc::new(BundleGrid { base, fiber, connection, ops: OnceLock::new() }))
}

impl BundleGrid {
    pub fn base(&self) -> &BaseGrid {
        &self.base
    }

    pub fn fiber(&self) -> &SphereGrid {
        &self.fiber
    }

    pub fn n(&self) -> usize {
        self.base.dim
    }

    pub fn d(&self) -> usize {
        self.fiber.dim
    }

    /// Rank of the vector bundle.
    pub fn m(&self) -> usize {
        self.fiber.dim + 1
    }

    pub fn frame_dim(&self) -> usize {
        self.n() + self.d()
    }

    /// μ_a: 1 for horizontal frame indices, 0 for vertical ones.
    pub fn mu(&self, a: usize) -> u8 {
        u8::from(a < self.n())
    }

    pub fn len(&self) -> usize {
        self.base.len() * self.fiber.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fiber_len(&self) -> usize {
        self.fiber.len()
    }

    pub fn node(&self, b: usize, f: usize) -> usize {
        b * self.fiber.len() + f
    }

    pub fn split(&self, node: usize) -> (usize, usize) {
        (node / self.fiber.len(), node % self.fiber.len())
    }

    pub fn coords(&self, node: usize) -> NodeCoords {
        let (b, f) = self.split(node);
        let (phi, theta) = self.fiber.angles(f);
        NodeCoords { x: self.base.coords(b), phi, theta, dir: self.fiber.point(f) }
    }

    /// Largest grid spacing over base and fiber axes.
    pub fn h(&self) -> f64 {
        self.base.h().max(self.fiber.h())
    }

    pub fn has_connection(&self) -> bool {
        self.connection.is_some()
    }

    /// Quadrature weights of the product measure on Σ.
    pub fn weights(&self) -> Vec<f64> {
        let wb = self.base.weight();
        (0..self.base.len()).flat_map(|_| self.fiber.weights.iter().map(move |w| w * wb)).collect()
    }

    pub fn measure(&self) -> f64 {
        self.base.measure() * self.fiber.measure()
    }

    /// Coefficients c_{iα} = (A_i y)·e_α so that e_i = ∂_i − c_{iα} e_α.
    fn lift_coefficients(&self) -> Option<Vec<Vec<Vec<f64>>>> {
        let conn = self.connection.as_ref()?;
        let (n, d) = (self.n(), self.d());
        let mut c = vec![vec![vec![0.0; self.len()]; d]; n];
        for node in 0..self.len() {
            let (b, f) = self.split(node);
            let y = self.fiber.point(f);
            let frame = self.fiber.frame(f);
            for (i, a) in conn[b].iter().enumerate() {
                let ay: Vec<f64> = (0..3).map(|r| (0..3).map(|s| a[r][s] * y[s]).sum()).collect();
                for (al, e) in frame.iter().enumerate() {
                    c[i][al][node] = (0..3).map(|r| ay[r] * e[r]).sum();
                }
            }
        }
        Some(c)
    }

    pub fn ops(&self) -> &DiffOps {
        self.ops.get_or_init(|| DiffOps::build(self))
    }
}

/// Assembled linear difference operators on the bundle.
#[derive(Debug)]
pub struct DiffOps {
    /// D_a for scalar fields.
    pub grad: Vec<Csr>,
    /// D_a applied to tensor components that change sign across a pole
    /// (an odd number of vertical indices on the 2-sphere).
    pub grad_odd: Vec<Csr>,
    /// D_{ab}; horizontal and vertical blocks are symmetric, mixed entries
    /// are ordered: `hess[i][α] = e_i(e_α u)`, `hess[α][i] = e_α(e_i u)`.
    pub hess: Vec<Vec<Csr>>,
}

fn kron_base(base_op: &Csr, nf: usize) -> Csr {
    let mut e = Vec::with_capacity(base_op.nnz() * nf);
    for (bi, bj, v) in base_op.triplets() {
        for f in 0..nf {
            e.push((bi * nf + f, bj * nf + f, v));
        }
    }
    Csr::from_triplets(base_op.nrows() * nf, base_op.ncols() * nf, e)
}

fn kron_fiber(fiber_op: &Csr, nb: usize) -> Csr {
    let nf = fiber_op.nrows();
    let t = fiber_op.triplets();
    let mut e = Vec::with_capacity(t.len() * nb);
    for b in 0..nb {
        e.extend(t.iter().map(|&(i, j, v)| (b * nf + i, b * nf + j, v)));
    }
    Csr::from_triplets(nf * nb, nf * nb, e)
}

struct FiberOps {
    grad: Vec<Csr>,
    grad_odd: Vec<Csr>,
    hess: Vec<Vec<Csr>>,
}

fn fiber_ops(s: &SphereGrid) -> FiberOps {
    let nf = s.len();
    if s.dim == 1 {
        let h = s.h_theta();
        let n = s.n_theta;
        let mut g = Vec::new();
        let mut hh = Vec::new();
        for k in 0..n {
            let kp = (k + 1) % n;
            let km = (k + n - 1) % n;
            g.push((k, kp, 0.5 / h));
            g.push((k, km, -0.5 / h));
            hh.push((k, kp, 1.0 / (h * h)));
            hh.push((k, km, 1.0 / (h * h)));
            hh.push((k, k, -2.0 / (h * h)));
        }
        let grad = Csr::from_triplets(nf, nf, g);
        return FiberOps { grad: vec![grad.clone()], grad_odd: vec![grad], hess: vec![vec![Csr::from_triplets(nf, nf, hh)]] };
    }
    let (hp, ht) = (s.h_phi(), s.h_theta());
    let mut dphi = Vec::new();
    let mut dphi_odd = Vec::new();
    let mut dtheta = Vec::new();
    let mut pp = Vec::new();
    let mut tt = Vec::new();
    for j in 0..s.n_phi {
        let (sp, cp) = (s.phi(j).sin(), s.phi(j).cos());
        for k in 0..s.n_theta {
            let f = s.index(j, k);
            for (dj, w) in [(1isize, 0.5 / hp), (-1, -0.5 / hp)] {
                let (nb, crossed) = s.neighbor(j, k, dj, 0);
                dphi.push((f, nb, w));
                dphi_odd.push((f, nb, if crossed { -w } else { w }));
                pp.push((f, nb, 1.0 / (hp * hp)));
                // cot φ · ∂_φ term of Hess(e_θ, e_θ).
                tt.push((f, nb, cp / sp * w));
            }
            pp.push((f, f, -2.0 / (hp * hp)));
            for (dk, w) in [(1isize, 0.5 / (ht * sp)), (-1, -0.5 / (ht * sp))] {
                let (nb, _) = s.neighbor(j, k, 0, dk);
                dtheta.push((f, nb, w));
                tt.push((f, nb, 1.0 / (ht * ht * sp * sp)));
            }
            tt.push((f, f, -2.0 / (ht * ht * sp * sp)));
        }
    }
    let dphi = Csr::from_triplets(nf, nf, dphi);
    let dphi_odd = Csr::from_triplets(nf, nf, dphi_odd);
    let dtheta = Csr::from_triplets(nf, nf, dtheta);
    // Hess(e_φ, e_θ) = ∂_φ(u_θ / sin φ); u_θ / sin φ flips sign through the pole.
    let pt = dphi_odd.matmul(&dtheta);
    FiberOps {
        grad: vec![dphi, dtheta.clone()],
        grad_odd: vec![dphi_odd, dtheta],
        hess: vec![vec![Csr::from_triplets(nf, nf, pp), pt.clone()], vec![pt, Csr::from_triplets(nf, nf, tt)]],
    }
}

fn base_ops(b: &BaseGrid) -> (Vec<Csr>, Vec<Vec<Csr>>) {
    let nb = b.len();
    let h = b.h();
    let grad: Vec<Csr> = (0..b.dim)
        .map(|ax| {
            Csr::from_triplets(
                nb,
                nb,
                (0..nb).flat_map(|i| [(i, b.shift(i, ax, 1), 0.5 / h), (i, b.shift(i, ax, -1), -0.5 / h)]).collect(),
            )
        })
        .collect();
    let mut hess = vec![vec![Csr::zeros(nb, nb); b.dim]; b.dim];
    for ax in 0..b.dim {
        hess[ax][ax] = Csr::from_triplets(
            nb,
            nb,
            (0..nb)
                .flat_map(|i| {
                    [(i, b.shift(i, ax, 1), 1.0 / (h * h)), (i, b.shift(i, ax, -1), 1.0 / (h * h)), (i, i, -2.0 / (h * h))]
                })
                .collect(),
        );
    }
    if b.dim == 2 {
        let x = grad[0].matmul(&grad[1]);
        hess[0][1] = x.clone();
        hess[1][0] = x;
    }
    (grad, hess)
}

impl DiffOps {
    fn build(g: &BundleGrid) -> DiffOps {
        let (n, d) = (g.n(), g.d());
        let (nb, nf) = (g.base.len(), g.fiber.len());
        let fo = fiber_ops(&g.fiber);
        let (bg, bh) = base_ops(&g.base);
        let vgrad: Vec<Csr> = fo.grad.iter().map(|o| kron_fiber(o, nb)).collect();
        let vgrad_odd: Vec<Csr> = fo.grad_odd.iter().map(|o| kron_fiber(o, nb)).collect();
        let pgrad: Vec<Csr> = bg.iter().map(|o| kron_base(o, nf)).collect();
        let lift = g.lift_coefficients();
        let conn_term = |i: usize, v: &[Csr]| -> Option<Csr> {
            lift.as_ref().map(|c| {
                let terms: Vec<(&[f64], &Csr)> = (0..d).map(|al| (c[i][al].as_slice(), &v[al])).collect();
                Csr::weighted_sum(g.len(), g.len(), &terms)
            })
        };
        let hgrad = |v: &[Csr]| -> Vec<Csr> {
            (0..n)
                .map(|i| match conn_term(i, v) {
                    Some(c) => pgrad[i].add(&c.scaled(-1.0)),
                    None => pgrad[i].clone(),
                })
                .collect()
        };
        let egrad = hgrad(&vgrad);
        let egrad_odd = hgrad(&vgrad_odd);

        let fd = n + d;
        let mut hess = vec![vec![Csr::zeros(g.len(), g.len()); fd]; fd];
        for i in 0..n {
            for j in 0..n {
                let plain = kron_base(&bh[i][j], nf);
                hess[i][j] = match (conn_term(i, &vgrad), conn_term(j, &vgrad)) {
                    (Some(ci), Some(cj)) => {
                        // Symmetrized e_i e_j with the pure base part taken as a
                        // compact second difference.
                        let cross = pgrad[i].matmul(&cj).add(&ci.matmul(&pgrad[j]));
                        let cross_t = pgrad[j].matmul(&ci).add(&cj.matmul(&pgrad[i]));
                        let quad = ci.matmul(&cj).add(&cj.matmul(&ci));
                        plain.add(&cross.add(&cross_t).scaled(-0.5)).add(&quad.scaled(0.5))
                    }
                    _ => plain,
                };
            }
        }
        for al in 0..d {
            for be in 0..d {
                hess[n + al][n + be] = kron_fiber(&fo.hess[al][be], nb);
            }
        }
        for i in 0..n {
            for al in 0..d {
                hess[i][n + al] = egrad_odd[i].matmul(&vgrad[al]);
                hess[n + al][i] = vgrad[al].matmul(&egrad[i]);
            }
        }
        let mut grad = egrad;
        grad.extend(vgrad);
        let mut grad_odd = egrad_odd;
        grad_odd.extend(vgrad_odd);
        DiffOps { grad, grad_odd, hess }
    }
}

/// Nodal values of u on Σ, understood as extended radially constant to E_*.
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Arc<BundleGrid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<BundleGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidInput(format!("field has {} values, grid has {} nodes", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite field value at node {i}")));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Arc<BundleGrid>, c: f64) -> Self {
        let n = grid.len();
        ScalarField { grid, values: vec![c; n] }
    }

    pub fn from_fn(grid: Arc<BundleGrid>, f: impl Fn(&NodeCoords) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.coords(i))).collect();
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Arc<BundleGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same grid, new values (unchecked length is asserted).
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ScalarField { grid: self.grid.clone(), values }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn osc(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Quadrature mean over Σ.
    pub fn mean(&self) -> f64 {
        let w = self.grid.weights();
        self.values.iter().zip(&w).map(|(u, w)| u * w).sum::<f64>() / w.iter().sum::<f64>()
    }
}

/// Gradient and Hessian components in the orthonormal frame.
#[derive(Clone, Debug)]
pub struct FrameDerivatives {
    pub n: usize,
    pub d: usize,
    /// `grad[a][node]`.
    pub grad: Vec<Vec<f64>>,
    /// `hess[a][b][node]`; empty when only the gradient was requested.
    pub hess: Vec<Vec<Vec<f64>>>,
}

impl FrameDerivatives {
    pub fn grad_sq_h(&self, node: usize) -> f64 {
        (0..self.n).map(|i| self.grad[i][node].powi(2)).sum()
    }

    pub fn grad_sq_v(&self, node: usize) -> f64 {
        (self.n..self.n + self.d).map(|a| self.grad[a][node].powi(2)).sum()
    }

    /// Horizontal Hessian block at a node (row-major, n×n).
    pub fn hess_h(&self, node: usize) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.hess[i][j][node]).collect()).collect()
    }

    pub fn hess_v(&self, node: usize) -> Vec<Vec<f64>> {
        let n = self.n;
        (0..self.d).map(|a| (0..self.d).map(|b| self.hess[n + a][n + b][node]).collect()).collect()
    }

    /// Trace of the horizontal and vertical Hessian blocks.
    pub fn laplacian(&self, node: usize) -> f64 {
        (0..self.n + self.d).map(|a| self.hess[a][a][node]).sum()
    }
}

pub fn covariant_gradient(u: &ScalarField) -> FrameDerivatives {
    let g = &u.grid;
    let ops = g.ops();
    FrameDerivatives { n: g.n(), d: g.d(), grad: ops.grad.iter().map(|o| o.matvec_centered(&u.values)).collect(), hess: vec![] }
}

pub fn covariant_hessian(u: &ScalarField) -> FrameDerivatives {
    let mut fd = covariant_gradient(u);
    let ops = u.grid.ops();
    fd.hess = ops.hess.iter().map(|row| row.iter().map(|o| o.matvec_centered(&u.values)).collect()).collect();
    fd
}

/// Third covariant derivatives T_abc = (∇_a Hess u)(e_b, e_c), using the
/// round-sphere Levi-Civita connection on the fiber. Flattened as
/// `t[(a * k + b) * k + c][node]` with `k = n + d`.
#[derive(Clone, Debug)]
pub struct ThirdDerivatives {
    pub k: usize,
    pub t: Vec<Vec<f64>>,
}

impl ThirdDerivatives {
    pub fn get(&self, a: usize, b: usize, c: usize) -> &[f64] {
        &self.t[(a * self.k + b) * self.k + c]
    }
}

pub fn covariant_third(u: &ScalarField) -> ThirdDerivatives {
    let g = &u.grid;
    let (n, d) = (g.n(), g.d());
    let k = n + d;
    let ops = g.ops();
    let fd = covariant_hessian(u);
    let sym = |a: usize, b: usize| -> Vec<f64> {
        if a == b || (a < n) == (b < n) {
            fd.hess[a][b].clone()
        } else {
            fd.hess[a][b].iter().zip(&fd.hess[b][a]).map(|(x, y)| 0.5 * (x + y)).collect()
        }
    };
    let h: Vec<Vec<Vec<f64>>> = (0..k).map(|a| (0..k).map(|b| sym(a, b)).collect()).collect();
    let cot: Vec<f64> = (0..g.len())
        .map(|node| {
            let (p, _) = g.fiber().angles(g.split(node).1);
            p.cos() / p.sin()
        })
        .collect();
    let mut t = vec![vec![]; k * k * k];
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                let nvert = usize::from(b >= n) + usize::from(c >= n);
                let op = if d == 2 && nvert % 2 == 1 { &ops.grad_odd[a] } else { &ops.grad[a] };
                let mut v = op.matvec(&h[b][c]);
                if d == 2 && a == n + 1 {
                    // ∇_{e_θ} e_φ = cot φ e_θ,  ∇_{e_θ} e_θ = −cot φ e_φ.
                    let (ph, th) = (n, n + 1);
                    let conn = |x: usize| -> Option<(usize, f64)> {
                        if x == ph {
                            Some((th, 1.0))
                        } else if x == th {
                            Some((ph, -1.0))
                        } else {
                            None
                        }
                    };
                    if let Some((e, s)) = conn(b) {
                        for (node, val) in v.iter_mut().enumerate() {
                            *val -= s * cot[node] * h[e][c][node];
                        }
                    }
                    if let Some((e, s)) = conn(c) {
                        for (node, val) in v.iter_mut().enumerate() {
                            *val -= s * cot[node] * h[b][e][node];
                        }
                    }
                }
                t[(a * k + b) * k + c] = v;
            }
        }
    }
    ThirdDerivatives { k, t }
}

/// Chord-based vertical derivatives of u on the shell of radius ρ.
fn shell_vertical_gradient(u: &ScalarField, rho: f64) -> Vec<Vec<f64>> {
    let g = &u.grid;
    let s = g.fiber();
    let d = g.d();
    let mut out = vec![vec![0.0; g.len()]; d];
    let dist = |p: [f64; 3], q: [f64; 3]| rho * ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    for node in 0..g.len() {
        let (b, f) = g.split(node);
        let (j, kk) = s.row_col(f);
        let dirs: Vec<(isize, isize)> = if d == 1 { vec![(0, 1)] } else { vec![(1, 0), (0, 1)] };
        for (al, (dj, dk)) in dirs.into_iter().enumerate() {
            let (fp, _) = s.neighbor(j, kk, dj, dk);
            let (fm, _) = s.neighbor(j, kk, -dj, -dk);
            let chord = dist(s.point(fp), s.point(fm));
            out[al][node] = (u.values[g.node(b, fp)] - u.values[g.node(b, fm)]) / chord;
        }
    }
    out
}

/// Maximum violation of D_{aν}u = −(1−μ_a) r⁻¹ D_a u and D_{νν}u = 0 on Σ_r.
///
/// The radially constant extension is sampled on shells r·e^{±δ}, δ = 10h,
/// with chord-based tangential differences; ν-derivatives are centred
/// differences across the shells.
pub fn radial_identity_check(u: &ScalarField, r: f64) -> f64 {
    let g = &u.grid;
    let n = g.n();
    let delta = 10.0 * g.h();
    let (ro, ri) = (r * delta.exp(), r * (-delta).exp());
    let outer = shell_vertical_gradient(u, ro);
    let inner = shell_vertical_gradient(u, ri);
    let unit = covariant_gradient(u);
    let mut worst: f64 = 0.0;
    for al in 0..g.d() {
        for node in 0..g.len() {
            let dnu = (outer[al][node] - inner[al][node]) / (ro - ri);
            let expected = -unit.grad[n + al][node] / (r * r);
            worst = worst.max((dnu - expected).abs());
        }
    }
    // D_i u and u itself agree on every shell, so D_{iν}u and D_{νν}u are
    // identically zero for the radially constant extension.
    worst
}

/// Ratio checks of D_a u ∝ ρ^{μ_a − 1} between shells ρ = 1 and ρ = s:
/// maximum of |D_a u(s) − s^{μ_a − 1} D_a u(1)|.
pub fn homogeneity_violation(u: &ScalarField, s: f64) -> f64 {
    let one = shell_vertical_gradient(u, 1.0);
    let other = shell_vertical_gradient(u, s);
    let mut worst: f64 = 0.0;
    for (a, b) in one.iter().zip(&other) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((y - x / s).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(n: usize) -> Arc<BundleGrid> {
        build_bundle_grid(0, 1, 8, &[n], None).unwrap()
    }

    fn sphere(np: usize) -> Arc<BundleGrid> {
        build_bundle_grid(0, 2, 8, &[np, 2 * np], None).unwrap()
    }

    #[test]
    fn circle_weights() {
        let g = circle(64);
        assert_eq!(g.len(), 64);
        for w in g.weights() {
            assert!((w - 2.0 * PI / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sphere_weights_sum_to_4pi() {
        let g = sphere(32);
        let s: f64 = g.weights().iter().sum();
        assert!((s - 4.0 * PI).abs() / (4.0 * PI) < 1e-10);
        assert!(g.weights().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn product_count_and_frame() {
        let g = build_bundle_grid(1, 1, 16, &[32], None).unwrap();
        assert_eq!(g.len(), 512);
        assert_eq!((0..g.frame_dim()).map(|a| g.mu(a) as usize).sum::<usize>(), 1);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(build_bundle_grid(3, 1, 16, &[32], None).is_err());
        assert!(build_bundle_grid(0, 3, 16, &[32], None).is_err());
        assert!(build_bundle_grid(0, 1, 16, &[4], None).is_err());
        assert!(build_bundle_grid(0, 2, 16, &[16, 31], None).is_err());
    }

    #[test]
    fn rejects_non_antisymmetric_connection() {
        let bad = |_: [f64; 2]| vec![[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3]]];
        assert!(build_bundle_grid(1, 1, 16, &[16], Some(&bad)).is_err());
        let good = |x: [f64; 2]| vec![[[0.0, x[0].sin(), 0.0], [-x[0].sin(), 0.0, 0.0], [0.0; 3]]];
        assert!(build_bundle_grid(1, 1, 16, &[16], Some(&good)).unwrap().has_connection());
    }

    #[test]
    fn constants_are_annihilated() {
        for g in [circle(16), sphere(8), build_bundle_grid(2, 2, 8, &[8, 16], None).unwrap()] {
            let fd = covariant_hessian(&ScalarField::constant(g.clone(), 0.7));
            for c in fd.grad.iter().chain(fd.hess.iter().flatten()) {
                assert!(c.iter().all(|v| v.abs() < 1e-10));
            }
        }
    }

    fn circle_errors(n: usize) -> (f64, f64) {
        let g = circle(n);
        let u = ScalarField::from_fn(g.clone(), |c| c.theta.cos());
        let fd = covariant_hessian(&u);
        let mut eg: f64 = 0.0;
        let mut eh: f64 = 0.0;
        for i in 0..g.len() {
            let t = g.coords(i).theta;
            eg = eg.max((fd.grad[0][i] + t.sin()).abs());
            eh = eh.max((fd.hess[0][0][i] + t.cos()).abs());
        }
        (eg, eh)
    }

    #[test]
    fn circle_derivatives_second_order() {
        let (g1, h1) = circle_errors(64);
        let (g2, h2) = circle_errors(128);
        assert!(((g1 / g2).log2() - 2.0).abs() < 0.2);
        assert!(((h1 / h2).log2() - 2.0).abs() < 0.2);
    }

    fn sphere_errors(np: usize) -> (f64, f64) {
        let g = sphere(np);
        let u = ScalarField::from_fn(g.clone(), |c| c.phi.cos());
        let fd = covariant_hessian(&u);
        let mut eg: f64 = 0.0;
        let mut eh: f64 = 0.0;
        for i in 0..g.len() {
            let p = g.coords(i).phi;
            let norm = fd.grad_sq_v(i).sqrt();
            eg = eg.max((norm - p.sin().abs()).abs());
            // Hess(cos φ) = −cos φ · g on the unit sphere.
            let hv = fd.hess_v(i);
            eh = eh.max((hv[0][0] + p.cos()).abs()).max((hv[1][1] + p.cos()).abs()).max(hv[0][1].abs());
        }
        (eg, eh)
    }

    #[test]
    fn sphere_derivatives_second_order() {
        let (g1, h1) = sphere_errors(32);
        let (g2, h2) = sphere_errors(64);
        assert!(((g1 / g2).log2() - 2.0).abs() < 0.2, "{g1} {g2}");
        assert!(((h1 / h2).log2() - 2.0).abs() < 0.2, "{h1} {h2}");
    }

    #[test]
    fn vertical_block_symmetric() {
        let g = sphere(16);
        let u = ScalarField::from_fn(g.clone(), |c| c.dir[0] * c.dir[2] + 0.3 * c.dir[1]);
        let fd = covariant_hessian(&u);
        for i in 0..g.len() {
            assert!((fd.hess[0][1][i] - fd.hess[1][0][i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn base_pullback_has_no_vertical_gradient() {
        let g = build_bundle_grid(2, 2, 8, &[8, 16], None).unwrap();
        let u = ScalarField::from_fn(g.clone(), |c| c.x[0].sin() + (2.0 * c.x[1]).cos());
        let fd = covariant_gradient(&u);
        for a in 2..4 {
            assert!(fd.grad[a].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn radial_identity_converges() {
        let v1 = radial_identity_check(&ScalarField::from_fn(circle(64), |c| c.theta.cos()), 1.0);
        let v2 = radial_identity_check(&ScalarField::from_fn(circle(128), |c| c.theta.cos()), 1.0);
        assert!(((v1 / v2).log2() - 2.0).abs() < 0.2, "{v1} {v2}");
        assert_eq!(radial_identity_check(&ScalarField::constant(circle(16), 0.0), 1.0), 0.0);
    }

    #[test]
    fn connection_lift_matches_rotation() {
        // Constant rotation ω along the base: e_x u = ∂_x u − ω ∂_θ u.
        let w = 0.3;
        let conn = move |_: [f64; 2]| vec![[[0.0, -w, 0.0], [w, 0.0, 0.0], [0.0; 3]]];
        let g = build_bundle_grid(1, 1, 32, &[32], Some(&conn)).unwrap();
        let u = ScalarField::from_fn(g.clone(), |c| c.x[0].sin() * c.theta.cos());
        let fd = covariant_gradient(&u);
        for i in 0..g.len() {
            let c = g.coords(i);
            let exact = c.x[0].cos() * c.theta.cos() + w * c.x[0].sin() * c.theta.sin();
            assert!((fd.grad[0][i] - exact).abs() < 0.01, "{} vs {exact}", fd.grad[0][i]);
        }
    }
}
