//! Nonlinear operators N₁, N₂, the vertical Gaussian curvature, the
//! admissibility tensor G′_u, mode residuals and their Newton linearizations.
//!
//! Newton works on logarithmic residuals Γ; the raw determinant differences
//! are kept for reporting.

use crate::curvature::{CurvatureSpec, EvalPoint};
use crate::error::{Error, Result};
use crate::geometry::{covariant_hessian, FrameDerivatives, ScalarField};
use crate::sparse::Csr;

/// Eigenvalues at or below this mark a block as singular.
pub const SINGULAR_EIG: f64 = 1e-12;

/// Symmetric block of size 0, 1 or 2 stored row-major in a 2×2 array.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub size: usize,
    pub a: [[f64; 2]; 2],
}

impl Block {
    pub fn det(&self) -> f64 {
        match self.size {
            0 => 1.0,
            1 => self.a[0][0],
            _ => self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0],
        }
    }

    pub fn min_eig(&self) -> f64 {
        match self.size {
            0 => f64::INFINITY,
            1 => self.a[0][0],
            _ => {
                let (p, q, r) = (self.a[0][0], self.a[1][1], self.a[0][1]);
                let mean = 0.5 * (p + q);
                mean - (0.25 * (p - q) * (p - q) + r * r).sqrt()
            }
        }
    }

    pub fn inverse(&self) -> [[f64; 2]; 2] {
        match self.size {
            0 => [[0.0; 2]; 2],
            1 => [[1.0 / self.a[0][0], 0.0], [0.0, 0.0]],
            _ => {
                let det = self.det();
                [[self.a[1][1] / det, -self.a[0][1] / det], [-self.a[1][0] / det, self.a[0][0] / det]]
            }
        }
    }
}

/// G′_u = I + Du Duᵀ − D²u restricted to the horizontal or vertical block.
#[derive(Clone, Debug)]
pub struct AdmissibleTensor {
    pub horizontal: Vec<Block>,
    pub vertical: Vec<Block>,
    pub min_eig_h: Vec<f64>,
    pub min_eig_v: Vec<f64>,
    pub admissible: bool,
}

impl AdmissibleTensor {
    pub fn min_eigenvalue_h(&self) -> f64 {
        self.min_eig_h.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_eigenvalue_v(&self) -> f64 {
        self.min_eig_v.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue_h().min(self.min_eigenvalue_v())
    }
}

fn block(fd: &FrameDerivatives, node: usize, off: usize, size: usize) -> Block {
    let mut a = [[0.0; 2]; 2];
    for i in 0..size {
        for j in 0..size {
            let delta = if i == j { 1.0 } else { 0.0 };
            a[i][j] = delta + fd.grad[off + i][node] * fd.grad[off + j][node] - fd.hess[off + i][off + j][node];
        }
    }
    Block { size, a }
}

fn blocks_from(fd: &FrameDerivatives, len: usize) -> AdmissibleTensor {
    let horizontal: Vec<Block> = (0..len).map(|i| block(fd, i, 0, fd.n)).collect();
    let vertical: Vec<Block> = (0..len).map(|i| block(fd, i, fd.n, fd.d)).collect();
    let min_eig_h: Vec<f64> = horizontal.iter().map(Block::min_eig).collect();
    let min_eig_v: Vec<f64> = vertical.iter().map(Block::min_eig).collect();
    let admissible = min_eig_h.iter().chain(&min_eig_v).all(|&e| e > 0.0);
    AdmissibleTensor { horizontal, vertical, min_eig_h, min_eig_v, admissible }
}

pub fn admissible_tensor(u: &ScalarField) -> AdmissibleTensor {
    blocks_from(&covariant_hessian(u), u.grid().len())
}

pub fn n1_operator(u: &ScalarField) -> Vec<f64> {
    admissible_tensor(u).horizontal.iter().map(Block::det).collect()
}

pub fn n2_operator(u: &ScalarField) -> Vec<f64> {
    admissible_tensor(u).vertical.iter().map(Block::det).collect()
}

/// G^v = (1+|D^v u|²)^{−(m+1)/2} e^{−(m−1)u} N₂(u).
pub fn vertical_gauss_curvature(u: &ScalarField) -> Vec<f64> {
    let s = OpState::new(u);
    (0..s.len()).map(|i| s.gauss_curvature(i)).collect()
}

/// Derivatives and blocks of one field, shared by residuals and Jacobians.
pub struct OpState<'a> {
    pub u: &'a ScalarField,
    pub fd: FrameDerivatives,
    pub g: AdmissibleTensor,
}

impl<'a> OpState<'a> {
    pub fn new(u: &'a ScalarField) -> Self {
        let fd = covariant_hessian(u);
        let g = blocks_from(&fd, u.grid().len());
        OpState { u, fd, g }
    }

    fn len(&self) -> usize {
        self.u.values().len()
    }

    fn m(&self) -> f64 {
        self.u.grid().m() as f64
    }

    pub fn n1(&self, i: usize) -> f64 {
        self.g.horizontal[i].det()
    }

    pub fn n2(&self, i: usize) -> f64 {
        self.g.vertical[i].det()
    }

    /// 1 + |D^v u|².
    pub fn w(&self, i: usize) -> f64 {
        1.0 + self.fd.grad_sq_v(i)
    }

    pub fn gauss_curvature(&self, i: usize) -> f64 {
        let m = self.m();
        self.w(i).powf(-0.5 * (m + 1.0)) * (-(m - 1.0) * self.u.values()[i]).exp() * self.n2(i)
    }

    fn point(&self, i: usize, log_rho: f64) -> EvalPoint {
        EvalPoint::at_node(self.u.grid(), i, log_rho.exp())
    }

    /// Raw residual N₂ − (1+|D^v u|²)^{(m+1)/2} e^{(m−1)u} K(e^u ξ).
    pub fn residual_direct(&self, k: &CurvatureSpec) -> Vec<f64> {
        let m = self.m();
        (0..self.len())
            .map(|i| {
                let u = self.u.values()[i];
                self.n2(i) - self.w(i).powf(0.5 * (m + 1.0)) * ((m - 1.0) * u).exp() * k.eval(&self.point(i, u))
            })
            .collect()
    }

    /// log N₂ − (m+1)/2 log(1+|D^v u|²) − (m−1)u − log K(e^u ξ).
    pub fn log_residual_direct(&self, k: &CurvatureSpec) -> Vec<f64> {
        let m = self.m();
        (0..self.len())
            .map(|i| {
                let u = self.u.values()[i];
                self.n2(i).ln() - 0.5 * (m + 1.0) * self.w(i).ln() - (m - 1.0) * u - k.eval(&self.point(i, u)).ln()
            })
            .collect()
    }

    /// Zeroth-order coefficient of the direct-mode Jacobian:
    /// −(m−1) − ρ∂_ρ log K at ρ = e^u.
    pub fn direct_zeroth(&self, k: &CurvatureSpec) -> Vec<f64> {
        let m = self.m();
        (0..self.len())
            .map(|i| -(m - 1.0) - k.log_slope(&self.point(i, self.u.values()[i])))
            .collect()
    }

    pub fn residual_theorem3(&self, f: &CurvatureSpec, lambda: f64, t: f64) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let r1 = (0..self.len()).map(|i| self.n1(i) - 1.0).collect();
        let r2 = (0..self.len())
            .map(|i| {
                let u = self.u.values()[i];
                let fv = f.eval(&self.point(i, 0.0));
                self.n2(i) - (-lambda * u).exp() * (fv * self.w(i).powf(0.5 * (m + 1.0))).powf(t)
            })
            .collect();
        (r1, r2)
    }

    /// (log N₁, log N₂ + λu − t[log f + (m+1)/2 log(1+|D^v u|²)]).
    pub fn log_residual_theorem3(&self, f: &CurvatureSpec, lambda: f64, t: f64) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let r1 = (0..self.len()).map(|i| self.n1(i).ln()).collect();
        let r2 = (0..self.len())
            .map(|i| {
                let u = self.u.values()[i];
                let fv = f.eval(&self.point(i, 0.0));
                self.n2(i).ln() + lambda * u - t * (fv.ln() + 0.5 * (m + 1.0) * self.w(i).ln())
            })
            .collect();
        (r1, r2)
    }

    pub fn residual_theorem4(&self, w: &ScalarField, k: &CurvatureSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let r1 = (0..self.len()).map(|i| self.n1(i) - 1.0).collect();
        let r2 = (0..self.len())
            .map(|i| {
                let (u, wv) = (self.u.values()[i], w.values()[i]);
                let src = (m * wv).exp() * k.eval(&self.point(i, wv));
                self.n2(i) - (-u).exp() * src.powf(t) * self.w(i).powf(0.5 * (m + 1.0))
            })
            .collect();
        (r1, r2)
    }

    /// (log N₁, log N₂ + u − t[m w + log K(e^w ξ)] − (m+1)/2 log(1+|D^v u|²)).
    pub fn log_residual_theorem4(&self, w: &ScalarField, k: &CurvatureSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let r1 = (0..self.len()).map(|i| self.n1(i).ln()).collect();
        let r2 = (0..self.len())
            .map(|i| {
                let (u, wv) = (self.u.values()[i], w.values()[i]);
                let src = m * wv + k.eval(&self.point(i, wv)).ln();
                self.n2(i).ln() + u - t * src - 0.5 * (m + 1.0) * self.w(i).ln()
            })
            .collect();
        (r1, r2)
    }

    /// Assembles w ↦ G′^{αβ}(2D_αu D_βw − D_{αβ}w) + c w − g(m+1) D^αu D_αw/(1+|D^v u|²).
    pub fn vertical_jacobian(&self, zeroth: &[f64], grad_coef: f64) -> Result<Csr> {
        let min = self.g.min_eigenvalue_v();
        if min.is_nan() || min <= SINGULAR_EIG {
            return Err(Error::SingularLinearization(format!("vertical block minimum eigenvalue {min:e}")));
        }
        let (n, d) = (self.fd.n, self.fd.d);
        let len = self.len();
        let m = self.m();
        let ops = self.u.grid().ops();
        let inv: Vec<[[f64; 2]; 2]> = self.g.vertical.iter().map(Block::inverse).collect();
        let mut hess_c = vec![vec![vec![0.0; len]; d]; d];
        let mut grad_c = vec![vec![0.0; len]; d];
        for i in 0..len {
            let wi = self.w(i);
            for b in 0..d {
                let mut s = 0.0;
                for a in 0..d {
                    hess_c[a][b][i] = -inv[i][a][b];
                    s += 2.0 * inv[i][a][b] * self.fd.grad[n + a][i];
                }
                grad_c[b][i] = s - grad_coef * (m + 1.0) * self.fd.grad[n + b][i] / wi;
            }
        }
        let diag = Csr::diagonal(zeroth);
        let mut terms: Vec<(&[f64], &Csr)> = Vec::new();
        for a in 0..d {
            for b in 0..d {
                terms.push((&hess_c[a][b], &ops.hess[n + a][n + b]));
            }
            terms.push((&grad_c[a], &ops.grad[n + a]));
        }
        let ones = vec![1.0; len];
        terms.push((&ones, &diag));
        Ok(Csr::weighted_sum(len, len, &terms))
    }

    /// Assembles w ↦ G′^{ij}(2D_iu D_jw − D_{ij}w), the derivative of log N₁.
    pub fn horizontal_jacobian(&self) -> Result<Csr> {
        let n = self.fd.n;
        let len = self.len();
        if n == 0 {
            return Ok(Csr::zeros(len, len));
        }
        let min = self.g.min_eigenvalue_h();
        if min.is_nan() || min <= SINGULAR_EIG {
            return Err(Error::SingularLinearization(format!("horizontal block minimum eigenvalue {min:e}")));
        }
        let ops = self.u.grid().ops();
        let inv: Vec<[[f64; 2]; 2]> = self.g.horizontal.iter().map(Block::inverse).collect();
        let mut hess_c = vec![vec![vec![0.0; len]; n]; n];
        let mut grad_c = vec![vec![0.0; len]; n];
        for i in 0..len {
            for b in 0..n {
                for a in 0..n {
                    hess_c[a][b][i] = -inv[i][a][b];
                    grad_c[b][i] += 2.0 * inv[i][a][b] * self.fd.grad[a][i];
                }
            }
        }
        let mut terms: Vec<(&[f64], &Csr)> = Vec::new();
        for a in 0..n {
            for b in 0..n {
                terms.push((&hess_c[a][b], &ops.hess[a][b]));
            }
            terms.push((&grad_c[a], &ops.grad[a]));
        }
        Ok(Csr::weighted_sum(len, len, &terms))
    }
}

pub fn residual_direct(u: &ScalarField, k: &CurvatureSpec) -> Vec<f64> {
    OpState::new(u).residual_direct(k)
}

pub fn residual_theorem3(u: &ScalarField, f: &CurvatureSpec, lambda: f64, t: f64) -> (Vec<f64>, Vec<f64>) {
    OpState::new(u).residual_theorem3(f, lambda, t)
}

pub fn residual_theorem4(u: &ScalarField, w: &ScalarField, k: &CurvatureSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
    OpState::new(u).residual_theorem4(w, k, t)
}

/// Linearization d_uΓ of the logarithmic vertical residual with constant
/// zeroth-order coefficient λ and gradient weight t.
pub fn linearize_vertical(u: &ScalarField, lambda: f64, t: f64) -> Result<Csr> {
    OpState::new(u).vertical_jacobian(&vec![lambda; u.values().len()], t)
}

pub fn linearize_horizontal(u: &ScalarField) -> Result<Csr> {
    OpState::new(u).horizontal_jacobian()
}

/// Residual of N₂(u) = e^{(m−1)u} K(e^u ξ)(1+|D^v u|²)^{(m+1)/2}, identical to
/// the direct residual.
pub fn residual_prescribed(u: &ScalarField, k: &CurvatureSpec) -> Vec<f64> {
    residual_direct(u, k)
}
