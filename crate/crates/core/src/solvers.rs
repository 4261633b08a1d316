//! Damped Newton, homotopy continuation in t, the Nagumo fixed-point scheme
//! and runtime monitors for the a priori bounds.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::curvature::{CurvatureSpec, EvalPoint};
use crate::curvature_ops::OpState;
use crate::error::{Error, Result};
use crate::geometry::{covariant_third, BundleGrid, ScalarField};
use crate::sparse::{self, Csr};

/// Weight of the linearized N₁ = 1 rows in the coupled least-squares step.
const CONSTRAINT_WEIGHT: f64 = 1e3;
/// Tikhonov weight of the N₁ re-projection pass.
const PROJECTION_DAMPING: f64 = 1e-10;
/// Relative decrease of the least-squares merit below which a step counts as stalled.
const STAGNATION: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Max-norm of the logarithmic residual.
    pub tol: f64,
    pub max_iters: usize,
    pub backtrack: f64,
    pub min_step: f64,
    pub dt0: f64,
    pub dt_min: f64,
    pub lambda: f64,
    pub r1: f64,
    pub r2: f64,
    pub admissibility_guard: bool,
    /// Mean of u per fiber for homothety-invariant K in direct mode.
    pub mean_pin: Option<f64>,
    /// Krasnoselskii averaging weight.
    pub sigma: f64,
    pub stall_sweeps: usize,
    pub max_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iters: 50,
            backtrack: 0.5,
            min_step: 2f64.powi(-20),
            dt0: 0.1,
            dt_min: 1e-4,
            lambda: 1.0,
            r1: 1.0,
            r2: 1.0,
            admissibility_guard: true,
            mean_pin: None,
            sigma: 0.5,
            stall_sweeps: 20,
            max_sweeps: 500,
        }
    }
}

impl SolverConfig {
    /// Every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let pos = |name: &str, x: f64, v: &mut Vec<String>| {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} must be positive and finite (got {x})"));
            }
        };
        pos("tol", self.tol, &mut v);
        pos("min_step", self.min_step, &mut v);
        pos("dt0", self.dt0, &mut v);
        pos("dt_min", self.dt_min, &mut v);
        pos("lambda", self.lambda, &mut v);
        pos("r1", self.r1, &mut v);
        pos("r2", self.r2, &mut v);
        if self.max_iters == 0 {
            v.push("max_iters must be at least 1".into());
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            v.push(format!("backtrack must lie in (0, 1) (got {})", self.backtrack));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            v.push(format!("sigma must lie in (0, 1] (got {})", self.sigma));
        }
        if self.dt_min > self.dt0 {
            v.push(format!("dt_min {} exceeds dt0 {}", self.dt_min, self.dt0));
        }
        if self.r1 > 1.0 {
            v.push(format!("r1 must not exceed 1 (got {})", self.r1));
        }
        if self.r2 < 1.0 {
            v.push(format!("r2 must be at least 1 (got {})", self.r2));
        }
        if let Some(p) = self.mean_pin {
            if !p.is_finite() {
                v.push("mean_pin must be finite".into());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// One Newton iterate (iteration 0 is the starting point).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NewtonIterate {
    pub t: f64,
    pub iter: usize,
    pub residual: f64,
    pub step: f64,
    pub min_eig: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HomotopyStep {
    pub t: f64,
    pub accepted: bool,
    pub newton_iters: usize,
    pub residual: f64,
    pub min_eig: f64,
    /// Sweeps of the fixed-point scheme (Nagumo mode only).
    pub sweeps: Option<usize>,
    pub c0_satisfied: Option<bool>,
    pub note: Option<String>,
}

/// Lemma-1 checks over every admissible accepted iterate.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct IterateChecks {
    pub checked: usize,
    pub violations: usize,
    /// Largest max(|D_h u|², |D_v u|²) / (e^{2 osc u} − 1) seen (0/0 counts as 0).
    pub worst_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MonitorRecord {
    pub osc: f64,
    pub admissible: bool,
    pub min_eig_h: f64,
    pub min_eig_v: f64,
    pub max_grad_sq_h: f64,
    pub max_grad_sq_v: f64,
    pub lemma1_bound: f64,
    /// Only evaluated for admissible u.
    pub lemma1_satisfied: Option<bool>,
    /// n+m−1+|Du|²−Δu over nodes.
    pub band_min: f64,
    pub band_max: f64,
    /// (n+m−1)(min F)^{1/(n+m−1)}.
    pub band_lower: f64,
    /// band_min ≥ band_lower − 10h².
    pub band_satisfied: bool,
    pub c0_window: Option<(f64, f64)>,
    pub c0_bound_satisfied: Option<bool>,
    pub omega_max: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SolveReport {
    pub mode: String,
    pub converged: bool,
    pub failure: Option<String>,
    pub homotopy_trace: Vec<HomotopyStep>,
    pub newton: Vec<NewtonIterate>,
    pub iterate_checks: IterateChecks,
    pub monitors: Option<MonitorRecord>,
    pub residuals: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

impl SolveReport {
    fn new(mode: &str) -> Self {
        SolveReport { mode: mode.into(), ..Default::default() }
    }

    /// Residual history as max-norms, in iteration order.
    pub fn residual_history(&self) -> Vec<f64> {
        self.newton.iter().map(|n| n.residual).collect()
    }

    pub fn total_newton_iters(&self) -> usize {
        self.newton.iter().filter(|n| n.iter > 0).count()
    }

    fn warn(&mut self, w: String) {
        if !self.warnings.contains(&w) {
            self.warnings.push(w);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub u: ScalarField,
    pub report: SolveReport,
}

/// A failed solve with its partial report and last iterate.
#[derive(Debug)]
pub struct SolveFailure {
    pub error: Error,
    pub report: SolveReport,
    pub last: Option<ScalarField>,
}

impl std::fmt::Display for SolveFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for SolveFailure {}

/// Residual and Jacobian of one Newton system in logarithmic form.
pub trait NewtonSystem {
    /// Stacked residual rows.
    fn residual(&self, s: &OpState) -> Vec<f64>;
    fn jacobian(&self, s: &OpState) -> Result<Csr>;
    /// Smallest eigenvalue of the guarded G′ blocks.
    fn margin(&self, s: &OpState) -> f64;
    /// Row weights; rows beyond the unknown count make the step a weighted
    /// least-squares solve.
    fn row_weights(&self, _len: usize) -> Option<Vec<f64>> {
        None
    }
    /// Per-fiber mean constraint.
    fn pin(&self) -> Option<f64> {
        None
    }
    /// Correction applied after each accepted step.
    fn project(&self, u: ScalarField) -> ScalarField {
        u
    }
    fn t(&self) -> f64 {
        1.0
    }
}

/// Direct mode: the prescribed-curvature equation itself.
pub struct DirectSystem<'k> {
    pub k: &'k CurvatureSpec,
    pub pin: Option<f64>,
}

impl NewtonSystem for DirectSystem<'_> {
    fn residual(&self, s: &OpState) -> Vec<f64> {
        s.log_residual_direct(self.k)
    }

    fn jacobian(&self, s: &OpState) -> Result<Csr> {
        s.vertical_jacobian(&s.direct_zeroth(self.k), 1.0)
    }

    fn margin(&self, s: &OpState) -> f64 {
        s.g.min_eigenvalue_v()
    }

    fn pin(&self) -> Option<f64> {
        self.pin
    }
}

/// The coupled family N₁ = 1, log N₂ = −λu + t·src + g·(m+1)/2 log(1+|D^v u|²)
/// shared by the Theorem-3 path and the Theorem-4 inner solve.
pub struct CoupledSystem<'a> {
    src: Vec<f64>,
    lambda: f64,
    grad_coef: f64,
    t: f64,
    coupled: bool,
    _k: std::marker::PhantomData<&'a ()>,
}

impl<'a> CoupledSystem<'a> {
    /// Theorem-3 system at parameter t: src = log f, gradient weight t.
    pub fn theorem3(grid: &BundleGrid, f: &CurvatureSpec, lambda: f64, t: f64) -> Self {
        let src = (0..grid.len()).map(|i| t * f.eval(&EvalPoint::at_node(grid, i, 1.0)).ln()).collect();
        CoupledSystem { src, lambda, grad_coef: t, t, coupled: grid.n() > 0, _k: Default::default() }
    }

    /// Theorem-4 inner system H_t w: src = t[m w + log K(e^w ξ)], λ = 1, gradient weight 1.
    pub fn theorem4(w: &ScalarField, k: &CurvatureSpec, t: f64) -> Self {
        let grid = w.grid();
        let m = grid.m() as f64;
        let src = w
            .values()
            .iter()
            .enumerate()
            .map(|(i, &wv)| t * (m * wv + k.eval(&EvalPoint::at_node(grid, i, wv.exp())).ln()))
            .collect();
        CoupledSystem { src, lambda: 1.0, grad_coef: 1.0, t, coupled: grid.n() > 0, _k: Default::default() }
    }

    fn vertical(&self, s: &OpState) -> Vec<f64> {
        let m = s.u.grid().m() as f64;
        (0..self.src.len())
            .map(|i| {
                s.n2(i).ln() + self.lambda * s.u.values()[i] - self.src[i] - self.grad_coef * 0.5 * (m + 1.0) * s.w(i).ln()
            })
            .collect()
    }
}

impl NewtonSystem for CoupledSystem<'_> {
    fn residual(&self, s: &OpState) -> Vec<f64> {
        let mut r: Vec<f64> = if self.coupled { (0..self.src.len()).map(|i| s.n1(i).ln()).collect() } else { vec![] };
        r.extend(self.vertical(s));
        r
    }

    fn jacobian(&self, s: &OpState) -> Result<Csr> {
        let a = s.vertical_jacobian(&vec![self.lambda; self.src.len()], self.grad_coef)?;
        if self.coupled {
            Ok(sparse::vstack(&[&s.horizontal_jacobian()?, &a]))
        } else {
            Ok(a)
        }
    }

    fn margin(&self, s: &OpState) -> f64 {
        s.g.min_eigenvalue()
    }

    fn row_weights(&self, len: usize) -> Option<Vec<f64>> {
        self.coupled.then(|| {
            let mut w = vec![CONSTRAINT_WEIGHT; len];
            w.extend(std::iter::repeat_n(1.0, len));
            w
        })
    }

    fn project(&self, u: ScalarField) -> ScalarField {
        if !self.coupled {
            return u;
        }
        project_n1(u, self.src.len())
    }

    fn t(&self) -> f64 {
        self.t
    }
}

/// A few Gauss–Newton passes on log N₁ = 0 alone, Tikhonov-regularized so the
/// large kernel of the horizontal operator stays untouched.
fn project_n1(mut u: ScalarField, len: usize) -> ScalarField {
    let reg = Csr::identity(len).scaled(PROJECTION_DAMPING.sqrt());
    for _ in 0..5 {
        let s = OpState::new(&u);
        let r: Vec<f64> = (0..len).map(|i| s.n1(i).ln()).collect();
        let before = max_abs(&r);
        if !before.is_finite() || before <= 1e-14 {
            break;
        }
        let Ok(b) = s.horizontal_jacobian() else { break };
        let a = sparse::vstack(&[&b, &reg]);
        let mut rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        rhs.extend(std::iter::repeat_n(0.0, len));
        let Ok(z) = sparse::lstsq(&a, &rhs) else { break };
        let cand = u.with_values(u.values().iter().zip(&z).map(|(a, b)| a + b).collect());
        let sc = OpState::new(&cand);
        let after = max_abs(&(0..len).map(|i| sc.n1(i).ln()).collect::<Vec<_>>());
        if !(after < before) || !sc.g.admissible {
            break;
        }
        u = cand;
    }
    u
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &b| if b.is_nan() { f64::NAN } else { a.max(b.abs()) })
}

fn norm2_weighted(v: &[f64], w: Option<&[f64]>) -> f64 {
    match w {
        Some(w) => v.iter().zip(w).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt(),
        None => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
    }
}

/// Lemma-1 quantities of an iterate: (ratio, satisfied).
fn lemma1(s: &OpState) -> (f64, bool) {
    let len = s.u.values().len();
    let gmax = (0..len).map(|i| s.fd.grad_sq_h(i).max(s.fd.grad_sq_v(i))).fold(0.0, f64::max);
    let bound = (2.0 * s.u.osc()).exp_m1();
    let ratio = if gmax == 0.0 { 0.0 } else { gmax / bound };
    (ratio, gmax <= bound)
}

fn record_iterate(report: &mut SolveReport, s: &OpState, t: f64, iter: usize, residual: f64, step: f64) {
    let min_eig = s.g.min_eigenvalue();
    report.newton.push(NewtonIterate { t, iter, residual, step, min_eig });
    if s.g.admissible {
        let (ratio, ok) = lemma1(s);
        let c = &mut report.iterate_checks;
        c.checked += 1;
        if !ok {
            c.violations += 1;
        }
        c.worst_ratio = c.worst_ratio.max(ratio);
    }
}

/// Newton step: square (optionally bordered by per-fiber mean rows) or
/// weighted least squares.
fn newton_step(sys: &dyn NewtonSystem, s: &OpState, r: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let j = sys.jacobian(s)?;
    let len = s.u.values().len();
    if let Some(w) = weights {
        let jw = j.row_scaled(w);
        let rhs: Vec<f64> = r.iter().zip(w).map(|(a, b)| -a * b).collect();
        return sparse::lstsq(&jw, &rhs);
    }
    let Some(p) = sys.pin() else {
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        return sparse::solve(&j, &rhs);
    };
    // [J E; Qᵀ 0] with E the fiber indicator and Q the fiber quadrature.
    let grid = s.u.grid();
    let nf = grid.fiber_len();
    let nb = grid.base().len();
    let qw = grid.fiber().weights();
    let mut e = j.triplets();
    let mut rhs: Vec<f64> = r.iter().map(|v| -v).collect();
    for b in 0..nb {
        let mut mean = 0.0;
        let mut wsum = 0.0;
        for f in 0..nf {
            let node = grid.node(b, f);
            e.push((node, len + b, 1.0));
            e.push((len + b, node, qw[f]));
            mean += qw[f] * s.u.values()[node];
            wsum += qw[f];
        }
        rhs.push(p * wsum - mean);
    }
    let a = Csr::from_triplets(len + nb, len + nb, e);
    let mut x = sparse::solve(&a, &rhs)?;
    x.truncate(len);
    Ok(x)
}

/// Damped Newton on `sys` from `u0`. Each accepted step reduces the residual
/// (max-norm for square systems, weighted 2-norm for least squares) and, with
/// the guard on, keeps every guarded G′ block positive definite.
pub fn newton_solve(
    sys: &dyn NewtonSystem,
    u0: ScalarField,
    cfg: &SolverConfig,
    report: &mut SolveReport,
) -> std::result::Result<ScalarField, (Error, ScalarField)> {
    let len = u0.values().len();
    let weights = sys.row_weights(len);
    let mut u = u0;
    let (mut r, mut margin) = {
        let s = OpState::new(&u);
        let r = sys.residual(&s);
        let margin = sys.margin(&s);
        record_iterate(report, &s, sys.t(), 0, max_abs(&r), 0.0);
        (r, margin)
    };
    if cfg.admissibility_guard && !(margin > 0.0) {
        return Err((Error::AdmissibilityLoss { step: 0.0, min_eig: margin }, u));
    }
    if !max_abs(&r).is_finite() {
        return Err((Error::SingularLinearization("non-finite residual at the starting point".into()), u));
    }
    let mut stalled = 0;
    for iter in 1..=cfg.max_iters {
        let rnorm = max_abs(&r);
        if rnorm <= cfg.tol {
            return Ok(u);
        }
        let merit = if weights.is_some() { norm2_weighted(&r, weights.as_deref()) } else { rnorm };
        let delta = {
            let s = OpState::new(&u);
            match newton_step(sys, &s, &r, weights.as_deref()) {
                Ok(d) => d,
                Err(e) => return Err((e, u)),
            }
        };
        let mut step = 1.0;
        loop {
            let cand = u.with_values(u.values().iter().zip(&delta).map(|(a, b)| a + step * b).collect());
            let s = OpState::new(&cand);
            let m = sys.margin(&s);
            let rc = sys.residual(&s);
            let admissible = !cfg.admissibility_guard || m > 0.0;
            let mc = if weights.is_some() { norm2_weighted(&rc, weights.as_deref()) } else { max_abs(&rc) };
            if admissible && mc.is_finite() && mc < merit {
                // Gauss–Newton creeping toward a nonzero least-squares minimum.
                if weights.is_some() && merit - mc <= STAGNATION * merit {
                    stalled += 1;
                    if stalled >= 3 {
                        return Err((Error::Inconsistent { residual: rnorm }, u));
                    }
                } else {
                    stalled = 0;
                }
                drop(s);
                let cand = sys.project(cand);
                let s = OpState::new(&cand);
                r = sys.residual(&s);
                margin = sys.margin(&s);
                record_iterate(report, &s, sys.t(), iter, max_abs(&r), step);
                drop(s);
                u = cand;
                break;
            }
            let guard_hit = !admissible;
            step *= cfg.backtrack;
            if step < cfg.min_step {
                let err = if guard_hit {
                    Error::AdmissibilityLoss { step, min_eig: margin }
                } else if weights.is_some() {
                    Error::Inconsistent { residual: rnorm }
                } else {
                    Error::NonConvergence { iters: iter, residual: rnorm }
                };
                return Err((err, u));
            }
        }
    }
    let rnorm = max_abs(&r);
    if rnorm <= cfg.tol {
        Ok(u)
    } else {
        Err((Error::NonConvergence { iters: cfg.max_iters, residual: rnorm }, u))
    }
}

/// Quantities needed by [`monitor_bounds`] beyond u itself.
#[derive(Clone, Copy)]
pub enum MonitorContext<'a> {
    Direct(&'a CurvatureSpec),
    Theorem3 { f: &'a CurvatureSpec, lambda: f64 },
    Theorem4 { k: &'a CurvatureSpec, r1: f64, r2: f64 },
}

/// Oscillation, Lemma-1 gradient bound, Lemma-2 Laplacian band, C⁰ window
/// and optionally the discrete Ω norm of third derivatives.
pub fn monitor_bounds(u: &ScalarField, ctx: MonitorContext, with_omega: bool) -> MonitorRecord {
    let s = OpState::new(u);
    let g = u.grid();
    let len = g.len();
    let (n, m) = (g.n(), g.m());
    let m_f = m as f64;
    let k = n + m - 1;
    let osc = u.osc();
    let max_grad_sq_h = (0..len).map(|i| s.fd.grad_sq_h(i)).fold(0.0, f64::max);
    let max_grad_sq_v = (0..len).map(|i| s.fd.grad_sq_v(i)).fold(0.0, f64::max);
    let lemma1_bound = (2.0 * osc).exp_m1();
    let admissible = s.g.admissible;
    let band: Vec<f64> = (0..len)
        .map(|i| k as f64 + s.fd.grad_sq_h(i) + s.fd.grad_sq_v(i) - s.fd.laplacian(i))
        .collect();
    // F in N₁N₂ = (1+|D^v u|²)^{(m+1)/2} F(ξ, u) for the mode at t = 1.
    let f_rhs: Vec<f64> = (0..len)
        .map(|i| {
            let uv = u.values()[i];
            match ctx {
                MonitorContext::Direct(kk) => {
                    s.n1(i) * ((m_f - 1.0) * uv).exp() * kk.eval(&EvalPoint::at_node(g, i, uv.exp()))
                }
                MonitorContext::Theorem3 { f, lambda } => (-lambda * uv).exp() * f.eval(&EvalPoint::at_node(g, i, 1.0)),
                MonitorContext::Theorem4 { k: kk, .. } => {
                    ((m_f - 1.0) * uv).exp() * kk.eval(&EvalPoint::at_node(g, i, uv.exp()))
                }
            }
        })
        .collect();
    let fmin = f_rhs.iter().copied().fold(f64::INFINITY, f64::min);
    let band_lower = k as f64 * fmin.max(0.0).powf(1.0 / k as f64);
    let band_min = band.iter().copied().fold(f64::INFINITY, f64::min);
    let band_max = band.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h = g.h();
    let slack = 10.0 * h * h;
    let c0_window = match ctx {
        MonitorContext::Direct(_) => None,
        MonitorContext::Theorem3 { f, lambda } => {
            let lf = (0..len).map(|i| f.eval(&EvalPoint::at_node(g, i, 1.0)).ln().abs()).fold(0.0, f64::max);
            Some((-lf / lambda, lf / lambda))
        }
        MonitorContext::Theorem4 { r1, r2, .. } => Some((r1.ln(), r2.ln())),
    };
    let c0_satisfied = c0_window.map(|(lo, hi)| u.min() >= lo - slack && u.max() <= hi + slack);
    let omega_max = with_omega.then(|| omega_norm(u, &s));
    MonitorRecord {
        osc,
        admissible,
        min_eig_h: s.g.min_eigenvalue_h(),
        min_eig_v: s.g.min_eigenvalue_v(),
        max_grad_sq_h,
        max_grad_sq_v,
        lemma1_bound,
        lemma1_satisfied: admissible.then_some(max_grad_sq_h.max(max_grad_sq_v) <= lemma1_bound),
        band_min,
        band_max,
        band_lower,
        band_satisfied: band_min >= band_lower - slack,
        c0_window,
        c0_bound_satisfied: c0_satisfied,
        omega_max,
    }
}

/// max over nodes of Ω = (G′^{ab}G′^{cd}G′^{ef} D_{ace}u D_{bdf}u)^{1/2}.
fn omega_norm(u: &ScalarField, s: &OpState) -> f64 {
    let third = covariant_third(u);
    let g = u.grid();
    let (n, kd) = (g.n(), g.frame_dim());
    let mut worst: f64 = 0.0;
    for node in 0..g.len() {
        let mut ginv = vec![vec![0.0; kd]; kd];
        let ih = s.g.horizontal[node].inverse();
        let iv = s.g.vertical[node].inverse();
        for a in 0..n {
            for b in 0..n {
                ginv[a][b] = ih[a][b];
            }
        }
        for a in 0..g.d() {
            for b in 0..g.d() {
                ginv[n + a][n + b] = iv[a][b];
            }
        }
        let t = |a: usize, c: usize, e: usize| third.get(a, c, e)[node];
        let mut sum = 0.0;
        for a in 0..kd {
            for b in 0..kd {
                if ginv[a][b] == 0.0 {
                    continue;
                }
                for c in 0..kd {
                    for d in 0..kd {
                        if ginv[c][d] == 0.0 {
                            continue;
                        }
                        for e in 0..kd {
                            for f in 0..kd {
                                if ginv[e][f] != 0.0 {
                                    sum += ginv[a][b] * ginv[c][d] * ginv[e][f] * t(a, c, e) * t(b, d, f);
                                }
                            }
                        }
                    }
                }
            }
        }
        worst = worst.max(sum.max(0.0).sqrt());
    }
    worst
}

/// u − (fiber mean of u) + p on every fiber.
fn set_fiber_means(u: &ScalarField, p: f64) -> ScalarField {
    let g = u.grid();
    let qw = g.fiber().weights();
    let wsum: f64 = qw.iter().sum();
    let nf = g.fiber_len();
    let mut vals = u.values().to_vec();
    for b in 0..g.base().len() {
        let span = g.node(b, 0)..g.node(b, 0) + nf;
        let mean = vals[span.clone()].iter().zip(qw).map(|(v, w)| v * w).sum::<f64>() / wsum;
        vals[span].iter_mut().for_each(|v| *v += p - mean);
    }
    u.with_values(vals)
}

fn finish(report: &mut SolveReport, start: Instant, converged: bool, failure: Option<&Error>) {
    report.converged = converged;
    report.failure = failure.map(|e| e.to_string());
    report.wall_time_s = start.elapsed().as_secs_f64();
}

fn fail(mut report: SolveReport, start: Instant, error: Error, last: Option<ScalarField>) -> SolveFailure {
    finish(&mut report, start, false, Some(&error));
    SolveFailure { error, report, last }
}

fn check_grid_k(k: &CurvatureSpec, grid: &BundleGrid, report: &mut SolveReport) {
    if k.extrapolated() {
        report.warn("curvature table evaluated outside its sampled radii (log-linear extrapolation)".into());
    }
    let _ = grid;
}

/// Solves N₂(u) = (1+|D^v u|²)^{(m+1)/2} e^{(m−1)u} K(e^u ξ) by damped Newton from
/// `u0`. For homothety-invariant K the fiber means are pinned to
/// `cfg.mean_pin` (default 0).
pub fn solve_direct(k: &CurvatureSpec, u0: ScalarField, cfg: &SolverConfig) -> std::result::Result<Solution, SolveFailure> {
    let start = Instant::now();
    let mut report = SolveReport::new("direct");
    if let Err(e) = cfg.validate() {
        return Err(fail(report, start, e, None));
    }
    let grid = u0.grid().clone();
    let homothety = k.is_homothety_invariant(grid.m());
    let pin = if homothety {
        Some(cfg.mean_pin.unwrap_or(0.0))
    } else {
        if cfg.mean_pin.is_some() {
            report.warn("mean_pin ignored: K is not homothety-invariant, so the solution is already isolated".into());
        }
        None
    };
    let sys = DirectSystem { k, pin };
    // Shifting u by a constant per fiber leaves the residual unchanged for
    // homothety-invariant K, so the start can be moved onto the pinned means.
    let u0 = match pin {
        Some(p) => set_fiber_means(&u0, p),
        None => u0,
    };
    match newton_solve(&sys, u0, cfg, &mut report) {
        Ok(u) => {
            let s = OpState::new(&u);
            report.residuals.insert("log_residual_max".into(), max_abs(&sys.residual(&s)));
            report.residuals.insert("residual_max".into(), max_abs(&s.residual_direct(k)));
            report.homotopy_trace.push(HomotopyStep {
                t: 1.0,
                accepted: true,
                newton_iters: report.total_newton_iters(),
                residual: max_abs(&sys.residual(&s)),
                min_eig: s.g.min_eigenvalue(),
                sweeps: None,
                c0_satisfied: None,
                note: pin.map(|p| format!("fiber means pinned to {p}")),
            });
            drop(s);
            report.monitors = Some(monitor_bounds(&u, MonitorContext::Direct(k), false));
            check_grid_k(k, &grid, &mut report);
            finish(&mut report, start, true, None);
            Ok(Solution { u, report })
        }
        Err((e, last)) => {
            check_grid_k(k, &grid, &mut report);
            Err(fail(report, start, e, Some(last)))
        }
    }
}

/// Tracks the Theorem-3 family from t = 0 (u = 0) to t = 1.
pub fn continuity_path_theorem3(
    f: &CurvatureSpec,
    grid: &std::sync::Arc<BundleGrid>,
    cfg: &SolverConfig,
) -> std::result::Result<Solution, SolveFailure> {
    let start = Instant::now();
    let mut report = SolveReport::new("theorem3");
    if let Err(e) = cfg.validate() {
        return Err(fail(report, start, e, None));
    }
    let lambda = cfg.lambda;
    let ctx = MonitorContext::Theorem3 { f, lambda };
    let log_f_sup =
        (0..grid.len()).map(|i| f.eval(&EvalPoint::at_node(grid, i, 1.0)).ln().abs()).fold(0.0, f64::max);
    let c0 = log_f_sup / lambda;
    let slack = 10.0 * grid.h() * grid.h();
    let mut u = ScalarField::constant(grid.clone(), 0.0);
    let mut t = 0.0;
    let mut dt = cfg.dt0;
    report.homotopy_trace.push(HomotopyStep {
        t: 0.0,
        accepted: true,
        newton_iters: 0,
        residual: 0.0,
        min_eig: 1.0,
        sweeps: None,
        c0_satisfied: Some(true),
        note: Some("u = 0 solves the t = 0 system".into()),
    });
    while t < 1.0 {
        let t_try = (t + dt).min(1.0);
        let sys = CoupledSystem::theorem3(grid, f, lambda, t_try);
        let before = report.newton.len();
        match newton_solve(&sys, u.clone(), cfg, &mut report) {
            Ok(un) => {
                let s = OpState::new(&un);
                let res = max_abs(&sys.residual(&s));
                let c0_ok = un.min() >= -c0 - slack && un.max() <= c0 + slack;
                report.homotopy_trace.push(HomotopyStep {
                    t: t_try,
                    accepted: true,
                    newton_iters: report.newton.len() - before - 1,
                    residual: res,
                    min_eig: s.g.min_eigenvalue(),
                    sweeps: None,
                    c0_satisfied: Some(c0_ok),
                    note: None,
                });
                drop(s);
                u = un;
                t = t_try;
                dt = (2.0 * dt).min(cfg.dt0);
            }
            Err((e, last)) => {
                report.homotopy_trace.push(HomotopyStep {
                    t: t_try,
                    accepted: false,
                    newton_iters: report.newton.len() - before - 1,
                    residual: report.newton.last().map_or(f64::NAN, |n| n.residual),
                    min_eig: report.newton.last().map_or(f64::NAN, |n| n.min_eig),
                    sweeps: None,
                    c0_satisfied: None,
                    note: Some(e.to_string()),
                });
                if matches!(e, Error::Inconsistent { .. }) {
                    let err = Error::PathFailure { t: t_try, dt, reason: e.to_string() };
                    attach_final(&mut report, &last, f, lambda, 1.0, ctx);
                    return Err(fail(report, start, err, Some(last)));
                }
                dt *= 0.5;
                if dt < cfg.dt_min {
                    let err = Error::PathFailure { t, dt, reason: e.to_string() };
                    attach_final(&mut report, &u, f, lambda, t, ctx);
                    return Err(fail(report, start, err, Some(u)));
                }
            }
        }
    }
    attach_final(&mut report, &u, f, lambda, 1.0, ctx);
    finish(&mut report, start, true, None);
    Ok(Solution { u, report })
}

fn attach_final(report: &mut SolveReport, u: &ScalarField, f: &CurvatureSpec, lambda: f64, t: f64, ctx: MonitorContext) {
    let s = OpState::new(u);
    let (r1, r2) = s.residual_theorem3(f, lambda, t);
    let (l1, l2) = s.log_residual_theorem3(f, lambda, t);
    report.residuals.insert("n1_residual_max".into(), max_abs(&r1));
    report.residuals.insert("n2_residual_max".into(), max_abs(&r2));
    report.residuals.insert("log_n1_residual_max".into(), max_abs(&l1));
    report.residuals.insert("log_n2_residual_max".into(), max_abs(&l2));
    drop(s);
    report.monitors = Some(monitor_bounds(u, ctx, false));
}

/// Newton on the t = 1 Theorem-3 system from `u0` (no continuation).
pub fn solve_theorem3_from(
    f: &CurvatureSpec,
    u0: ScalarField,
    cfg: &SolverConfig,
) -> std::result::Result<Solution, SolveFailure> {
    let start = Instant::now();
    let mut report = SolveReport::new("theorem3");
    let grid = u0.grid().clone();
    let sys = CoupledSystem::theorem3(&grid, f, cfg.lambda, 1.0);
    let ctx = MonitorContext::Theorem3 { f, lambda: cfg.lambda };
    match newton_solve(&sys, u0, cfg, &mut report) {
        Ok(u) => {
            attach_final(&mut report, &u, f, cfg.lambda, 1.0, ctx);
            finish(&mut report, start, true, None);
            Ok(Solution { u, report })
        }
        Err((e, last)) => Err(fail(report, start, e, Some(last))),
    }
}

/// Solves the Theorem-3 system from two starts and returns ‖uᵃ − uᵇ‖_∞.
pub fn uniqueness_probe(
    f: &CurvatureSpec,
    ua: ScalarField,
    ub: ScalarField,
    cfg: &SolverConfig,
) -> std::result::Result<f64, SolveFailure> {
    let (a, b) = std::thread::scope(|sc| {
        let ha = sc.spawn(|| solve_theorem3_from(f, ua, cfg));
        let hb = sc.spawn(|| solve_theorem3_from(f, ub, cfg));
        (ha.join().expect("probe thread"), hb.join().expect("probe thread"))
    });
    Ok(a?.u.max_abs_diff(&b?.u))
}

/// Direct-mode counterpart of [`uniqueness_probe`], used to exhibit the
/// one-parameter family of solutions for homothety-invariant K.
pub fn uniqueness_probe_direct(
    k: &CurvatureSpec,
    ua: ScalarField,
    ub: ScalarField,
    cfg: &SolverConfig,
) -> std::result::Result<f64, SolveFailure> {
    let sa = solve_direct(k, ua.clone(), &SolverConfig { mean_pin: Some(ua.mean()), ..cfg.clone() })?;
    let sb = solve_direct(k, ub.clone(), &SolverConfig { mean_pin: Some(ub.mean()), ..cfg.clone() })?;
    Ok(sa.u.max_abs_diff(&sb.u))
}

/// Checks inequalities (K > ρ^{1−m} inside r₁, K < ρ^{1−m} outside r₂) at
/// ρ = r₁/2 and ρ = 2r₂ on every node; returns warnings.
pub fn barrier_precheck(k: &CurvatureSpec, grid: &BundleGrid, r1: f64, r2: f64) -> Vec<String> {
    let m = grid.m() as i32;
    let mut inner_bad = 0;
    let mut outer_bad = 0;
    for i in 0..grid.len() {
        let (ri, ro) = (0.5 * r1, 2.0 * r2);
        if !(k.eval(&EvalPoint::at_node(grid, i, ri)) > ri.powi(1 - m)) {
            inner_bad += 1;
        }
        if !(k.eval(&EvalPoint::at_node(grid, i, ro)) < ro.powi(1 - m)) {
            outer_bad += 1;
        }
    }
    let mut w = Vec::new();
    if inner_bad > 0 {
        w.push(format!("barrier check: K <= rho^(1-m) at rho = r1/2 on {inner_bad} nodes"));
    }
    if outer_bad > 0 {
        w.push(format!("barrier check: K >= rho^(1-m) at rho = 2 r2 on {outer_bad} nodes"));
    }
    w
}

/// Damped Picard iteration w ← (1−σ)w + σH_t w for the Theorem-4 operator,
/// continued in t from 0 to 1. Each H_t w is a coupled Newton solve.
pub fn nagumo_iteration_theorem4(
    k: &CurvatureSpec,
    grid: &std::sync::Arc<BundleGrid>,
    cfg: &SolverConfig,
) -> std::result::Result<Solution, SolveFailure> {
    let start = Instant::now();
    let mut report = SolveReport::new("theorem4");
    if let Err(e) = cfg.validate() {
        return Err(fail(report, start, e, None));
    }
    for w in barrier_precheck(k, grid, cfg.r1, cfg.r2) {
        report.warn(w);
    }
    let mut w = ScalarField::constant(grid.clone(), 0.0);
    let mut hw = w.clone();
    let mut t = 0.0;
    let mut dt = cfg.dt0;
    report.homotopy_trace.push(HomotopyStep {
        t: 0.0,
        accepted: true,
        newton_iters: 0,
        residual: 0.0,
        min_eig: 1.0,
        sweeps: Some(0),
        c0_satisfied: None,
        note: Some("H_0 w = 0 for every w".into()),
    });
    while t < 1.0 {
        let t_try = (t + dt).min(1.0);
        let before = report.newton.len();
        match fixed_point(k, &w, &hw, t_try, cfg, &mut report) {
            Ok((wn, hn, sweeps)) => {
                let s = OpState::new(&hn);
                report.homotopy_trace.push(HomotopyStep {
                    t: t_try,
                    accepted: true,
                    newton_iters: report.newton.len() - before,
                    residual: wn.max_abs_diff(&hn),
                    min_eig: s.g.min_eigenvalue(),
                    sweeps: Some(sweeps),
                    c0_satisfied: None,
                    note: None,
                });
                drop(s);
                w = wn;
                hw = hn;
                t = t_try;
                dt = (2.0 * dt).min(cfg.dt0);
            }
            Err(e @ Error::FixedPointStall { .. }) => {
                report.homotopy_trace.push(HomotopyStep {
                    t: t_try,
                    accepted: false,
                    newton_iters: report.newton.len() - before,
                    residual: f64::NAN,
                    min_eig: f64::NAN,
                    sweeps: None,
                    c0_satisfied: None,
                    note: Some(e.to_string()),
                });
                return Err(fail(report, start, e, Some(w)));
            }
            Err(e) => {
                report.homotopy_trace.push(HomotopyStep {
                    t: t_try,
                    accepted: false,
                    newton_iters: report.newton.len() - before,
                    residual: f64::NAN,
                    min_eig: f64::NAN,
                    sweeps: None,
                    c0_satisfied: None,
                    note: Some(e.to_string()),
                });
                dt *= 0.5;
                if dt < cfg.dt_min {
                    let err = Error::PathFailure { t, dt, reason: e.to_string() };
                    return Err(fail(report, start, err, Some(w)));
                }
            }
        }
    }
    let u = hw;
    let s = OpState::new(&u);
    let (r1, r2) = s.residual_theorem4(&w, k, 1.0);
    report.residuals.insert("n1_residual_max".into(), max_abs(&r1));
    report.residuals.insert("n2_residual_max".into(), max_abs(&r2));
    report.residuals.insert("fixed_point_gap".into(), u.max_abs_diff(&w));
    report.residuals.insert("prescribed_curvature_residual_max".into(), max_abs(&s.residual_direct(k)));
    drop(s);
    let mon = monitor_bounds(&u, MonitorContext::Theorem4 { k, r1: cfg.r1, r2: cfg.r2 }, false);
    let in_window = mon.c0_bound_satisfied == Some(true);
    if let Some(hs) = report.homotopy_trace.last_mut() {
        hs.c0_satisfied = Some(in_window);
    }
    report.monitors = Some(mon);
    check_grid_k(k, grid, &mut report);
    if !in_window {
        let h2 = 10.0 * grid.h() * grid.h();
        let err = Error::BarrierViolation { min_u: u.min(), max_u: u.max(), lo: cfg.r1.ln() - h2, hi: cfg.r2.ln() + h2 };
        return Err(fail(report, start, err, Some(u)));
    }
    finish(&mut report, start, true, None);
    Ok(Solution { u, report })
}

/// Inner solve u = H_t w.
fn apply_h(
    k: &CurvatureSpec,
    w: &ScalarField,
    start: &ScalarField,
    t: f64,
    cfg: &SolverConfig,
    report: &mut SolveReport,
) -> Result<ScalarField> {
    let sys = CoupledSystem::theorem4(w, k, t);
    newton_solve(&sys, start.clone(), cfg, report).map_err(|(e, _)| e)
}

fn fixed_point(
    k: &CurvatureSpec,
    w0: &ScalarField,
    h0: &ScalarField,
    t: f64,
    cfg: &SolverConfig,
    report: &mut SolveReport,
) -> Result<(ScalarField, ScalarField, usize)> {
    let mut w = w0.clone();
    let mut hw = apply_h(k, &w, h0, t, cfg, report)?;
    let mut gap = w.max_abs_diff(&hw);
    let mut bad = 0;
    let mut sweeps = 0;
    while gap > cfg.tol {
        let sg = cfg.sigma;
        w = w.with_values(w.values().iter().zip(hw.values()).map(|(a, b)| (1.0 - sg) * a + sg * b).collect());
        hw = apply_h(k, &w, &hw, t, cfg, report)?;
        let ng = w.max_abs_diff(&hw);
        let ratio = ng / gap;
        sweeps += 1;
        if ratio >= 1.0 {
            bad += 1;
            if bad >= cfg.stall_sweeps {
                return Err(Error::FixedPointStall { sweeps, ratio });
            }
        }
        if sweeps >= cfg.max_sweeps {
            return Err(Error::FixedPointStall { sweeps, ratio });
        }
        gap = ng;
    }
    Ok((w, hw, sweeps))
}

/// Solver mode with its data.
#[derive(Clone, Debug)]
pub enum Mode {
    Direct { k: CurvatureSpec },
    Theorem3 { f: CurvatureSpec },
    Theorem4 { k: CurvatureSpec },
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Direct { .. } => "direct",
            Mode::Theorem3 { .. } => "theorem3",
            Mode::Theorem4 { .. } => "theorem4",
        }
    }

    /// Runs the mode on `grid`; direct mode starts from `u0` (default 0).
    pub fn solve(
        &self,
        grid: &std::sync::Arc<BundleGrid>,
        u0: Option<ScalarField>,
        cfg: &SolverConfig,
    ) -> std::result::Result<Solution, SolveFailure> {
        match self {
            Mode::Direct { k } => {
                solve_direct(k, u0.unwrap_or_else(|| ScalarField::constant(grid.clone(), cfg.mean_pin.unwrap_or(0.0))), cfg)
            }
            Mode::Theorem3 { f } => continuity_path_theorem3(f, grid, cfg),
            Mode::Theorem4 { k } => nagumo_iteration_theorem4(k, grid, cfg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_bundle_grid;

    fn circle(n: usize) -> std::sync::Arc<BundleGrid> {
        build_bundle_grid(0, 1, 8, &[n], None).unwrap()
    }

    #[test]
    fn config_defaults_are_valid() {
        let c = SolverConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.min_step, 2f64.powi(-20));
        let bad = SolverConfig { r1: 2.0, tol: -1.0, ..c };
        assert_eq!(bad.violations().len(), 2);
    }

    #[test]
    fn direct_unit_curvature_from_constant() {
        let k = CurvatureSpec::Constant(1.0);
        let sol = solve_direct(&k, ScalarField::constant(circle(32), 0.3), &SolverConfig::default()).unwrap();
        assert!(sol.u.values().iter().all(|v| v.abs() < 1e-8));
        assert!(sol.report.total_newton_iters() <= 10);
        let hist = sol.report.residual_history();
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn direct_constant_four() {
        let k = CurvatureSpec::Constant(4.0);
        let sol = solve_direct(&k, ScalarField::constant(circle(32), 0.0), &SolverConfig::default()).unwrap();
        assert!(sol.u.values().iter().all(|v| (v + 4f64.ln()).abs() < 1e-8));
    }

    #[test]
    fn theorem3_constant_f_point_base() {
        let f = CurvatureSpec::Constant(std::f64::consts::E);
        let sol = continuity_path_theorem3(&f, &circle(16), &SolverConfig::default()).unwrap();
        assert!(sol.u.values().iter().all(|v| (v - 1.0).abs() < 1e-8));
        assert_eq!(sol.report.monitors.as_ref().unwrap().c0_bound_satisfied, Some(true));
    }

    #[test]
    fn uniqueness_for_unit_f() {
        let g = circle(16);
        let f = CurvatureSpec::Constant(1.0);
        let d = uniqueness_probe(
            &f,
            ScalarField::constant(g.clone(), 0.2),
            ScalarField::constant(g, -0.2),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(d <= 1e-8);
    }

    #[test]
    fn theorem4_unit_sphere() {
        let g = build_bundle_grid(0, 2, 8, &[8, 16], None).unwrap();
        let sol = nagumo_iteration_theorem4(&CurvatureSpec::Constant(1.0), &g, &SolverConfig::default()).unwrap();
        assert!(sol.u.values().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn monitors_of_zero() {
        let u = ScalarField::constant(circle(16), 0.0);
        let k = CurvatureSpec::Constant(1.0);
        let m = monitor_bounds(&u, MonitorContext::Direct(&k), true);
        assert_eq!(m.osc, 0.0);
        assert_eq!(m.lemma1_satisfied, Some(true));
        assert!((m.band_min - 1.0).abs() < 1e-15);
        assert_eq!(m.omega_max, Some(0.0));
    }
}
