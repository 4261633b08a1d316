//! Prescribed curvature functions K(x, θ, ρ) > 0 on E_*.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use meval::{ContextProvider, FuncEvalError};

use crate::error::{Error, Result};
use crate::geometry::BundleGrid;

/// A point ρθ of E_* over base point x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub x: [f64; 2],
    pub phi: f64,
    pub theta: f64,
    pub dir: [f64; 3],
    pub rho: f64,
    /// Rank of the bundle.
    pub m: usize,
}

impl EvalPoint {
    pub fn at_node(grid: &BundleGrid, node: usize, rho: f64) -> Self {
        let c = grid.coords(node);
        EvalPoint { x: c.x, phi: c.phi, theta: c.theta, dir: c.dir, rho, m: grid.m() }
    }

    pub fn with_rho(&self, rho: f64) -> Self {
        EvalPoint { rho, ..*self }
    }
}

struct Vars {
    x: f64,
    y: f64,
    theta: f64,
    phi: f64,
    rho: f64,
}

impl ContextProvider for Vars {
    fn get_var(&self, name: &str) -> Option<f64> {
        match name {
            "x" => Some(self.x),
            "y" => Some(self.y),
            "theta" => Some(self.theta),
            "phi" => Some(self.phi),
            "rho" => Some(self.rho),
            "pi" => Some(PI),
            "e" => Some(std::f64::consts::E),
            _ => None,
        }
    }

    fn eval_func(&self, name: &str, args: &[f64]) -> std::result::Result<f64, FuncEvalError> {
        let f: fn(f64) -> f64 = match name {
            "exp" => f64::exp,
            "log" | "ln" => f64::ln,
            "sin" => f64::sin,
            "cos" => f64::cos,
            "tan" => f64::tan,
            "sqrt" => f64::sqrt,
            "abs" => f64::abs,
            _ => return Err(FuncEvalError::UnknownFunction),
        };
        match args {
            [a] => Ok(f(*a)),
            [] => Err(FuncEvalError::TooFewArguments),
            _ => Err(FuncEvalError::TooManyArguments),
        }
    }
}

/// Arithmetic expression over a fixed set of variables.
#[derive(Clone)]
pub struct Expr {
    src: String,
    expr: meval::Expr,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.src)
    }
}

impl Expr {
    /// Parses `src`, rejecting variables outside `allowed`.
    pub fn parse(src: &str, allowed: &[&str]) -> Result<Self> {
        let err = |message: String| Error::Parse { location: format!("expression `{src}`"), message };
        let expr: meval::Expr = src.parse().map_err(|e: meval::Error| err(e.to_string()))?;
        // Probe with every variable bound; report the first unknown name.
        let probe = Vars { x: 0.3, y: 0.4, theta: 0.5, phi: 0.6, rho: 1.1 };
        match expr.eval_with_context(&probe) {
            Err(meval::Error::UnknownVariable(v)) => return Err(err(format!("unknown variable `{v}`"))),
            Err(e @ meval::Error::Function(..)) => return Err(err(e.to_string())),
            _ => {}
        }
        for v in ["x", "y", "theta", "phi", "rho"] {
            if !allowed.contains(&v) && mentions(src, v) {
                return Err(err(format!("variable `{v}` not allowed here (allowed: {})", allowed.join(", "))));
            }
        }
        Ok(Expr { src: src.to_string(), expr })
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    fn eval(&self, p: &EvalPoint) -> f64 {
        let v = Vars { x: p.x[0], y: p.x[1], theta: p.theta, phi: p.phi, rho: p.rho };
        self.expr.eval_with_context(&v).unwrap_or(f64::NAN)
    }
}

fn mentions(src: &str, var: &str) -> bool {
    let bytes = src.as_bytes();
    let ident = |c: u8| c.is_ascii_alphanumeric() || c == b'_';
    src.match_indices(var).any(|(i, _)| {
        let before = i == 0 || !ident(bytes[i - 1]);
        let after = i + var.len() >= bytes.len() || !ident(bytes[i + var.len()]);
        before && after
    })
}

/// Natural cubic spline through (t_k, y_k).
#[derive(Clone, Debug)]
struct Spline {
    t: Vec<f64>,
    y: Vec<f64>,
    m2: Vec<f64>,
}

impl Spline {
    fn new(t: Vec<f64>, y: Vec<f64>) -> Self {
        let n = t.len();
        let mut m2 = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives.
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            let mut c = vec![0.0; n];
            let mut r = vec![0.0; n];
            for i in 1..n - 1 {
                let (h0, h1) = (t[i] - t[i - 1], t[i + 1] - t[i]);
                a[i] = h0;
                b[i] = 2.0 * (h0 + h1);
                c[i] = h1;
                r[i] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 2..n - 1 {
                let w = a[i] / b[i - 1];
                b[i] -= w * c[i - 1];
                r[i] -= w * r[i - 1];
            }
            for i in (1..n - 1).rev() {
                m2[i] = (r[i] - c[i] * m2[i + 1]) / b[i];
            }
        }
        Spline { t, y, m2 }
    }

    /// Value and slope; linear continuation outside the knots.
    fn eval(&self, s: f64) -> (f64, f64, bool) {
        let (t, y, m) = (&self.t, &self.y, &self.m2);
        let n = t.len();
        let slope_at = |i: usize, left: bool| {
            let (k0, k1) = if left { (i, i + 1) } else { (i - 1, i) };
            let h = t[k1] - t[k0];
            let base = (y[k1] - y[k0]) / h;
            if left {
                base - h * (2.0 * m[k0] + m[k1]) / 6.0
            } else {
                base + h * (m[k0] + 2.0 * m[k1]) / 6.0
            }
        };
        if s < t[0] {
            let d = slope_at(0, true);
            return (y[0] + d * (s - t[0]), d, true);
        }
        if s > t[n - 1] {
            let d = slope_at(n - 1, false);
            return (y[n - 1] + d * (s - t[n - 1]), d, true);
        }
        let i = t.partition_point(|&v| v <= s).clamp(1, n - 1) - 1;
        let h = t[i + 1] - t[i];
        let (a, b) = ((t[i + 1] - s) / h, (s - t[i]) / h);
        let v = a * y[i] + b * y[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0;
        let dv = (y[i + 1] - y[i]) / h + ((1.0 - 3.0 * a * a) * m[i] + (3.0 * b * b - 1.0) * m[i + 1]) * h / 6.0;
        (v, dv, false)
    }
}

/// Sampled K with one radial spline in (log ρ, log K) per coordinate group.
#[derive(Debug)]
pub struct CurvatureTable {
    /// Column names for the coordinate part, e.g. `["x", "theta"]`.
    coord_names: Vec<String>,
    groups: Vec<(Vec<f64>, Spline)>,
    extrapolated: AtomicBool,
}

impl CurvatureTable {
    /// Builds a table from header names and numeric rows. The last two
    /// columns must be `rho` and `K`; earlier columns are coordinates among
    /// `x`, `y`, `theta`, `phi`. Row numbers in errors are 1-based data rows.
    pub fn from_rows(header: &[String], rows: &[Vec<f64>]) -> Result<Self> {
        let perr = |location: String, message: String| Error::Parse { location, message };
        let nc = header.len();
        if nc < 2 || header[nc - 2] != "rho" || header[nc - 1] != "K" {
            return Err(perr("header".into(), format!("expected trailing columns `rho,K`, found {header:?}")));
        }
        let coord_names: Vec<String> = header[..nc - 2].to_vec();
        for c in &coord_names {
            if !["x", "y", "theta", "phi"].contains(&c.as_str()) {
                return Err(perr("header".into(), format!("unknown coordinate column `{c}`")));
            }
        }
        let mut groups: Vec<(Vec<f64>, Vec<(f64, f64)>)> = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != nc {
                return Err(perr(format!("row {}", r + 1), format!("expected {nc} fields, found {}", row.len())));
            }
            let (rho, k) = (row[nc - 2], row[nc - 1]);
            if !(k > 0.0 && k.is_finite()) {
                return Err(perr(format!("row {}", r + 1), format!("K = {k} is not strictly positive")));
            }
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(perr(format!("row {}", r + 1), format!("rho = {rho} is not strictly positive")));
            }
            let key = row[..nc - 2].to_vec();
            match groups.iter_mut().find(|(g, _)| g.iter().zip(&key).all(|(a, b)| (a - b).abs() <= 1e-9)) {
                Some((_, pts)) => pts.push((rho, k)),
                None => groups.push((key, vec![(rho, k)])),
            }
        }
        if groups.is_empty() {
            return Err(perr("table".into(), "no data rows".into()));
        }
        let mut reference: Option<Vec<f64>> = None;
        let mut out = Vec::with_capacity(groups.len());
        for (key, mut pts) in groups {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let radii: Vec<f64> = pts.iter().map(|p| p.0).collect();
            if radii.len() < 2 || radii.windows(2).any(|w| w[1] - w[0] <= 1e-12 * w[1]) {
                return Err(perr(format!("group {key:?}"), "needs at least two distinct radii".into()));
            }
            match &reference {
                None => reference = Some(radii.clone()),
                Some(r0) => {
                    if r0.len() != radii.len() || r0.iter().zip(&radii).any(|(a, b)| (a - b).abs() > 1e-9 * a) {
                        return Err(perr(
                            format!("group {key:?}"),
                            "inconsistent grid: radii differ from the first coordinate group".into(),
                        ));
                    }
                }
            }
            let t = radii.iter().map(|r| r.ln()).collect();
            let y = pts.iter().map(|p| p.1.ln()).collect();
            out.push((key, Spline::new(t, y)));
        }
        Ok(CurvatureTable { coord_names, groups: out, extrapolated: AtomicBool::new(false) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::Parse { location: path.display().to_string(), message: e.to_string() })?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Parse { location: format!("{} header", path.display()), message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let loc = || format!("{} row {}", path.display(), i + 1);
            let rec = rec.map_err(|e| Error::Parse { location: loc(), message: e.to_string() })?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| Error::Parse { location: loc(), message: format!("`{f}`: {e}") }))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(&header, &rows).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse { location: format!("{} {location}", path.display()), message },
            other => other,
        })
    }

    fn coords_of(&self, p: &EvalPoint) -> Vec<f64> {
        self.coord_names
            .iter()
            .map(|c| match c.as_str() {
                "x" => p.x[0],
                "y" => p.x[1],
                "theta" => p.theta,
                _ => p.phi,
            })
            .collect()
    }

    fn group(&self, p: &EvalPoint) -> &Spline {
        if self.groups.len() == 1 {
            return &self.groups[0].1;
        }
        let c = self.coords_of(p);
        let dist = |key: &[f64]| -> f64 {
            key.iter()
                .zip(&c)
                .zip(&self.coord_names)
                .map(|((a, b), name)| {
                    let mut d = (a - b).abs();
                    if name == "theta" || name == "x" || name == "y" {
                        d = d.rem_euclid(2.0 * PI);
                        d = d.min(2.0 * PI - d);
                    }
                    d * d
                })
                .sum()
        };
        &self
            .groups
            .iter()
            .min_by(|a, b| dist(&a.0).total_cmp(&dist(&b.0)))
            .expect("non-empty table")
            .1
    }

    fn eval(&self, p: &EvalPoint) -> (f64, f64) {
        let (v, dv, extra) = self.group(p).eval(p.rho.ln());
        if extra {
            self.extrapolated.store(true, Ordering::Relaxed);
        }
        (v.exp(), dv)
    }

    /// True once any evaluation fell outside the sampled radii.
    pub fn extrapolated(&self) -> bool {
        self.extrapolated.load(Ordering::Relaxed)
    }
}

pub type CustomFn = Arc<dyn Fn(&EvalPoint) -> f64 + Send + Sync>;

/// The prescribed function K on E_*.
#[derive(Clone)]
pub enum CurvatureSpec {
    Constant(f64),
    /// K = κ∘π for a base function κ(x, y).
    FiberConstant(Expr),
    /// K = K(ρ).
    Radial(Expr),
    /// K(ρθ) = ρ^{1−m} k(x, y, θ, φ).
    Homothety(Expr),
    /// General expression in x, y, theta, phi, rho.
    Expression(Expr),
    Table(Arc<CurvatureTable>),
    Custom(CustomFn),
}

impl fmt::Debug for CurvatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CurvatureSpec({})", self.describe())
    }
}

impl CurvatureSpec {
    /// Parses `kind:args` (`constant:2`, `fiber:2+cos(x)`, `radial:2/(1+rho)`,
    /// `homothety:1`, `expr:...`) or `@path` for a table.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix('@') {
            return Ok(CurvatureSpec::Table(Arc::new(CurvatureTable::load(Path::new(path))?)));
        }
        let (kind, args) = s.split_once(':').ok_or_else(|| Error::Parse {
            location: format!("curvature `{s}`"),
            message: "expected `kind:args` or `@path`".into(),
        })?;
        Ok(match kind.trim() {
            "constant" => {
                let c: f64 = args.trim().parse().map_err(|e| Error::Parse {
                    location: format!("curvature `{s}`"),
                    message: format!("constant: {e}"),
                })?;
                CurvatureSpec::Constant(c)
            }
            "fiber" => CurvatureSpec::FiberConstant(Expr::parse(args, &["x", "y"])?),
            "radial" => CurvatureSpec::Radial(Expr::parse(args, &["rho"])?),
            "homothety" => CurvatureSpec::Homothety(Expr::parse(args, &["x", "y", "theta", "phi"])?),
            "expr" => CurvatureSpec::Expression(Expr::parse(args, &["x", "y", "theta", "phi", "rho"])?),
            other => {
                return Err(Error::Parse {
                    location: format!("curvature `{s}`"),
                    message: format!("unknown kind `{other}` (constant, fiber, radial, homothety, expr)"),
                })
            }
        })
    }

    pub fn custom(f: impl Fn(&EvalPoint) -> f64 + Send + Sync + 'static) -> Self {
        CurvatureSpec::Custom(Arc::new(f))
    }

    /// Text form accepted by [`CurvatureSpec::parse`] where one exists.
    pub fn describe(&self) -> String {
        match self {
            CurvatureSpec::Constant(c) => format!("constant:{c:?}"),
            CurvatureSpec::FiberConstant(e) => format!("fiber:{}", e.source()),
            CurvatureSpec::Radial(e) => format!("radial:{}", e.source()),
            CurvatureSpec::Homothety(e) => format!("homothety:{}", e.source()),
            CurvatureSpec::Expression(e) => format!("expr:{}", e.source()),
            CurvatureSpec::Table(_) => "table".into(),
            CurvatureSpec::Custom(_) => "custom".into(),
        }
    }

    pub fn eval(&self, p: &EvalPoint) -> f64 {
        match self {
            CurvatureSpec::Constant(c) => *c,
            CurvatureSpec::FiberConstant(e) | CurvatureSpec::Radial(e) | CurvatureSpec::Expression(e) => e.eval(p),
            CurvatureSpec::Homothety(e) => p.rho.powi(1 - p.m as i32) * e.eval(p),
            CurvatureSpec::Table(t) => t.eval(p).0,
            CurvatureSpec::Custom(f) => f(p),
        }
    }

    /// ρ ∂_ρ log K at the point.
    pub fn log_slope(&self, p: &EvalPoint) -> f64 {
        match self {
            CurvatureSpec::Constant(_) | CurvatureSpec::FiberConstant(_) => 0.0,
            CurvatureSpec::Homothety(_) => 1.0 - p.m as f64,
            CurvatureSpec::Table(t) => t.eval(p).1,
            _ => {
                let s: f64 = 1e-5;
                let up = self.eval(&p.with_rho(p.rho * s.exp())).ln();
                let dn = self.eval(&p.with_rho(p.rho * (-s).exp())).ln();
                (up - dn) / (2.0 * s)
            }
        }
    }

    /// Independent of ρ and of the fiber direction.
    pub fn is_base_only(&self) -> bool {
        matches!(self, CurvatureSpec::Constant(_) | CurvatureSpec::FiberConstant(_))
    }

    /// K(rξ) = r^{1−m} K(ξ) for all r, so constant shifts of u leave the
    /// equation unchanged.
    pub fn is_homothety_invariant(&self, m: usize) -> bool {
        match self {
            CurvatureSpec::Homothety(_) => true,
            CurvatureSpec::Radial(_) => {
                let p = EvalPoint { x: [0.0; 2], phi: 0.5 * PI, theta: 0.0, dir: [1.0, 0.0, 0.0], rho: 1.0, m };
                let psi = |r: f64| r.powi(m as i32 - 1) * self.eval(&p.with_rho(r));
                let p1 = psi(1.0);
                [0.25, 0.5, 2.0, 4.0, 8.0].iter().all(|&r| (psi(r) - p1).abs() <= 1e-12 * p1.abs())
            }
            _ => false,
        }
    }

    pub fn extrapolated(&self) -> bool {
        matches!(self, CurvatureSpec::Table(t) if t.extrapolated())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(rho: f64) -> EvalPoint {
        EvalPoint { x: [0.5, 0.0], phi: 0.5 * PI, theta: 1.0, dir: [1.0, 0.0, 0.0], rho, m: 2 }
    }

    #[test]
    fn parses_kinds() {
        assert_eq!(CurvatureSpec::parse("constant:4").unwrap().eval(&pt(3.0)), 4.0);
        let k = CurvatureSpec::parse("radial:2/(1+rho)").unwrap();
        assert!((k.eval(&pt(1.0)) - 1.0).abs() < 1e-15);
        let f = CurvatureSpec::parse("fiber:2+cos(x)").unwrap();
        assert!((f.eval(&pt(9.0)) - (2.0 + 0.5f64.cos())).abs() < 1e-15);
        let h = CurvatureSpec::parse("homothety:1").unwrap();
        assert!((h.eval(&pt(2.0)) - 0.5).abs() < 1e-15);
        let e = CurvatureSpec::parse("expr:exp(-rho)*log(e)+pi-pi").unwrap();
        assert!((e.eval(&pt(1.0)) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_expressions() {
        assert!(CurvatureSpec::parse("radial:2/(1+x)").is_err());
        assert!(CurvatureSpec::parse("expr:2*zeta").is_err());
        assert!(CurvatureSpec::parse("blob:1").is_err());
        assert!(CurvatureSpec::parse("fiber:(1+").is_err());
    }

    #[test]
    fn log_slopes() {
        let k = CurvatureSpec::parse("radial:2/(1+rho)").unwrap();
        // ρ ∂ρ log(2/(1+ρ)) = −ρ/(1+ρ).
        assert!((k.log_slope(&pt(1.0)) + 0.5).abs() < 1e-9);
        assert_eq!(CurvatureSpec::parse("homothety:2").unwrap().log_slope(&pt(3.0)), -1.0);
    }

    #[test]
    fn homothety_detection() {
        assert!(CurvatureSpec::parse("radial:1/rho").unwrap().is_homothety_invariant(2));
        assert!(CurvatureSpec::parse("radial:rho^(-2)").unwrap().is_homothety_invariant(3));
        assert!(!CurvatureSpec::parse("radial:2/(1+rho)").unwrap().is_homothety_invariant(2));
    }

    #[test]
    fn table_spline_and_extrapolation() {
        let header: Vec<String> = ["rho", "K"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<f64>> = (0..9).map(|i| 0.5 + 0.25 * i as f64).map(|r| vec![r, 2.0 / (1.0 + r)]).collect();
        let t = CurvatureTable::from_rows(&header, &rows).unwrap();
        let k = CurvatureSpec::Table(Arc::new(t));
        assert!((k.eval(&pt(1.1)) - 2.0 / 2.1).abs() < 1e-4);
        assert!(!k.extrapolated());
        let _ = k.eval(&pt(10.0));
        assert!(k.extrapolated());
    }

    #[test]
    fn table_rejects_zero_k_with_row() {
        let header: Vec<String> = ["rho", "K"].iter().map(|s| s.to_string()).collect();
        let rows = vec![vec![1.0, 1.0], vec![2.0, 0.0]];
        match CurvatureTable::from_rows(&header, &rows) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "row 2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spline_reproduces_linear_data() {
        let s = Spline::new(vec![0.0, 1.0, 2.5, 3.0], vec![1.0, 3.0, 6.0, 7.0]);
        let (v, d, _) = s.eval(1.7);
        assert!((v - 4.4).abs() < 1e-14 && (d - 2.0).abs() < 1e-14);
    }
}
