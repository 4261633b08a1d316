//! Run configuration, curvature tables and output files (CSV field, OBJ
//! mesh, JSON report).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::curvature::{CurvatureSpec, CurvatureTable};
use crate::error::{Error, Result};
use crate::geometry::{build_bundle_grid, BundleGrid, ScalarField};
use crate::solvers::{SolveReport, SolverConfig};
use crate::verification::{embed_and_measure, sphere_faces};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Direct,
    Theorem3,
    Theorem4,
    Verify,
    Convergence,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Direct => "direct",
            RunMode::Theorem3 => "theorem3",
            RunMode::Theorem4 => "theorem4",
            RunMode::Verify => "verify",
            RunMode::Convergence => "convergence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(RunMode::Direct),
            "theorem3" => Ok(RunMode::Theorem3),
            "theorem4" => Ok(RunMode::Theorem4),
            "verify" => Ok(RunMode::Verify),
            "convergence" => Ok(RunMode::Convergence),
            _ => Err(Error::Parse {
                location: "--mode".into(),
                message: format!("unknown mode `{s}` (expected direct, theorem3, theorem4, verify or convergence)"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Base dimension n (flat torus T^n, n ≤ 2).
    pub base_dim: usize,
    /// Fiber dimension d = m − 1 (1 or 2).
    pub fiber_dim: usize,
    pub base_res: usize,
    /// `[N]` for circles, `[N_phi, N_theta]` or `[N_phi]` for spheres.
    pub fiber_res: Vec<usize>,
    /// Number of resolutions in a convergence study (each doubles the last).
    pub levels: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { base_dim: 0, fiber_dim: 1, base_res: 16, fiber_res: vec![64], levels: 3 }
    }
}

impl GeometryConfig {
    /// Grid at refinement `level` (0 is the configured resolution; each level
    /// doubles every resolution).
    pub fn grid(&self, level: usize) -> Result<Arc<BundleGrid>> {
        let s = 1usize << level;
        let fiber: Vec<usize> = self.fiber_res.iter().map(|r| r * s).collect();
        build_bundle_grid(self.base_dim, self.fiber_dim, self.base_res * s, &fiber, None)
    }

    /// The `levels` grids of a convergence study.
    pub fn grids(&self) -> Result<Vec<Arc<BundleGrid>>> {
        (0..self.levels).map(|l| self.grid(l)).collect()
    }
}

/// Exactly one kind may be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
    /// Function of the base point only, e.g. `2+cos(x)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fiber: Option<String>,
    /// Function of rho only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radial: Option<String>,
    /// k(x, theta, phi) with K = rho^(1-m) k.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub homothety: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
}

impl CurvatureConfig {
    fn kinds(&self) -> Vec<&'static str> {
        let mut k = Vec::new();
        if self.constant.is_some() {
            k.push("constant");
        }
        if self.fiber.is_some() {
            k.push("fiber");
        }
        if self.radial.is_some() {
            k.push("radial");
        }
        if self.homothety.is_some() {
            k.push("homothety");
        }
        if self.expr.is_some() {
            k.push("expr");
        }
        if self.table.is_some() {
            k.push("table");
        }
        k
    }

    /// From the `kind:args` / `@path` flag syntax.
    pub fn from_flag(s: &str) -> Result<Self> {
        let mut c = CurvatureConfig::default();
        if let Some(p) = s.strip_prefix('@') {
            c.table = Some(PathBuf::from(p));
            return Ok(c);
        }
        let bad = |message: String| Error::Parse { location: format!("--curvature `{s}`"), message };
        let (kind, args) = s.split_once(':').ok_or_else(|| bad("expected `kind:args` or `@path`".into()))?;
        let args = args.trim().to_string();
        match kind.trim() {
            "constant" => c.constant = Some(args.parse().map_err(|e| bad(format!("{e}")))?),
            "fiber" => c.fiber = Some(args),
            "radial" => c.radial = Some(args),
            "homothety" => c.homothety = Some(args),
            "expr" => c.expr = Some(args),
            other => return Err(bad(format!("unknown kind `{other}`"))),
        }
        Ok(c)
    }

    pub fn is_set(&self) -> bool {
        !self.kinds().is_empty()
    }

    /// Builds the curvature; the caller validates that exactly one kind is set.
    pub fn build(&self) -> Result<CurvatureSpec> {
        if let Some(c) = self.constant {
            return CurvatureSpec::parse(&format!("constant:{c:e}"));
        }
        if let Some(p) = &self.table {
            return load_curvature_table(p);
        }
        let (kind, src) = [("fiber", &self.fiber), ("radial", &self.radial), ("homothety", &self.homothety), ("expr", &self.expr)]
            .into_iter()
            .find_map(|(k, v)| v.as_ref().map(|s| (k, s)))
            .ok_or_else(|| Error::Validation(vec!["curvature: no kind given".into()]))?;
        CurvatureSpec::parse(&format!("{kind}:{src}"))
    }
}

/// Solver settings as read from a file; unset values take solver defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_pin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backtrack: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub admissibility_guard: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub curvature: CurvatureConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub out_prefix: String,
}

fn default_seed() -> u64 {
    42
}

fn default_prefix() -> String {
    "radgraph".into()
}

/// Flag values that override a configuration file.
#[derive(Clone, Debug, Default)]
pub struct ConfigOverrides {
    pub mode: Option<RunMode>,
    pub base_dim: Option<usize>,
    pub fiber_dim: Option<usize>,
    pub base_res: Option<usize>,
    pub fiber_res: Option<Vec<usize>>,
    pub levels: Option<usize>,
    pub curvature: Option<String>,
    pub lambda: Option<f64>,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub mean_pin: Option<f64>,
    pub seed: Option<u64>,
    pub out_prefix: Option<String>,
}

impl RunConfig {
    pub fn new(mode: RunMode) -> Self {
        RunConfig {
            mode,
            geometry: GeometryConfig::default(),
            curvature: CurvatureConfig::default(),
            solver: SolverSection::default(),
            seed: default_seed(),
            out_prefix: default_prefix(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| {
            let location = match e.span() {
                Some(sp) => {
                    let line = s[..sp.start.min(s.len())].matches('\n').count() + 1;
                    format!("line {line}")
                }
                None => "config".into(),
            };
            Error::Parse { location, message: e.message().to_string() }
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::Parse { location: format!("line {}, column {}", e.line(), e.column()), message: e.to_string() })
    }

    /// Reads TOML or JSON (by extension; `.json` is JSON, anything else TOML).
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r = if path.extension().is_some_and(|e| e == "json") { Self::from_json_str(&s) } else { Self::from_toml_str(&s) };
        r.map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse { location: format!("{}: {location}", path.display()), message },
            other => other,
        })
    }

    pub fn apply(&mut self, o: &ConfigOverrides) -> Result<()> {
        if let Some(m) = o.mode {
            self.mode = m;
        }
        let g = &mut self.geometry;
        if let Some(v) = o.base_dim {
            g.base_dim = v;
        }
        if let Some(v) = o.fiber_dim {
            g.fiber_dim = v;
        }
        if let Some(v) = o.base_res {
            g.base_res = v;
        }
        if let Some(v) = &o.fiber_res {
            g.fiber_res = v.clone();
        }
        if let Some(v) = o.levels {
            g.levels = v;
        }
        if let Some(c) = &o.curvature {
            self.curvature = CurvatureConfig::from_flag(c)?;
        }
        let s = &mut self.solver;
        s.lambda = o.lambda.or(s.lambda);
        s.r1 = o.r1.or(s.r1);
        s.r2 = o.r2.or(s.r2);
        s.tol = o.tol.or(s.tol);
        s.max_iters = o.max_iters.or(s.max_iters);
        s.mean_pin = o.mean_pin.or(s.mean_pin);
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out_prefix {
            self.out_prefix = v.clone();
        }
        Ok(())
    }

    /// Every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let g = &self.geometry;
        if g.base_dim > 2 {
            v.push(format!("geometry.base_dim must be 0, 1 or 2 (got {})", g.base_dim));
        }
        if !(1..=2).contains(&g.fiber_dim) {
            v.push(format!("geometry.fiber_dim must be 1 or 2 (got {})", g.fiber_dim));
        }
        if g.base_dim > 0 && g.base_res < 8 {
            v.push(format!("geometry.base_res must be at least 8 (got {})", g.base_res));
        }
        let max_len = if g.fiber_dim == 2 { 2 } else { 1 };
        if g.fiber_res.is_empty() || g.fiber_res.len() > max_len {
            v.push(format!("geometry.fiber_res must have 1 to {max_len} entries (got {})", g.fiber_res.len()));
        }
        if g.fiber_res.iter().any(|&r| r < 8) {
            v.push("geometry.fiber_res entries must be at least 8".into());
        }
        if g.fiber_dim == 2 && g.fiber_res.len() == 2 && g.fiber_res[1] % 2 == 1 {
            v.push(format!("geometry.fiber_res: N_theta must be even (got {})", g.fiber_res[1]));
        }
        if g.fiber_dim == 1 && g.fiber_res.first().is_some_and(|r| r % 2 == 1) {
            v.push(format!("geometry.fiber_res: N must be even (got {})", g.fiber_res[0]));
        }
        if self.mode == RunMode::Convergence && g.levels < 3 {
            v.push(format!("geometry.levels must be at least 3 for a convergence study (got {})", g.levels));
        }
        let kinds = self.curvature.kinds();
        if kinds.len() > 1 {
            v.push(format!("curvature: kinds {} are mutually exclusive", kinds.join(" and ")));
        }
        if kinds.is_empty() && self.mode != RunMode::Verify {
            v.push("curvature: one of constant, fiber, radial, homothety, expr or table is required".into());
        }
        if self.mode == RunMode::Theorem4 {
            if self.solver.r1.is_none() {
                v.push("solver.r1 is required in theorem4 mode".into());
            }
            if self.solver.r2.is_none() {
                v.push("solver.r2 is required in theorem4 mode".into());
            }
        }
        let sc = self.solver_config();
        v.extend(sc.violations().into_iter().map(|s| format!("solver.{s}")));
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

    pub fn solver_config(&self) -> SolverConfig {
        let d = SolverConfig::default();
        let s = &self.solver;
        SolverConfig {
            tol: s.tol.unwrap_or(d.tol),
            max_iters: s.max_iters.unwrap_or(d.max_iters),
            lambda: s.lambda.unwrap_or(d.lambda),
            r1: s.r1.unwrap_or(d.r1),
            r2: s.r2.unwrap_or(d.r2),
            mean_pin: s.mean_pin,
            dt0: s.dt0.unwrap_or(d.dt0),
            dt_min: s.dt_min.unwrap_or(d.dt_min),
            sigma: s.sigma.unwrap_or(d.sigma),
            backtrack: s.backtrack.unwrap_or(d.backtrack),
            admissibility_guard: s.admissibility_guard.unwrap_or(d.admissibility_guard),
            ..d
        }
    }

    /// Same configuration with every solver default written out.
    pub fn effective(&self) -> RunConfig {
        let c = self.solver_config();
        let mut out = self.clone();
        out.solver = SolverSection {
            tol: Some(c.tol),
            max_iters: Some(c.max_iters),
            lambda: Some(c.lambda),
            r1: Some(c.r1),
            r2: Some(c.r2),
            mean_pin: c.mean_pin,
            dt0: Some(c.dt0),
            dt_min: Some(c.dt_min),
            sigma: Some(c.sigma),
            backtrack: Some(c.backtrack),
            admissibility_guard: Some(c.admissibility_guard),
        };
        out
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }
}

/// Reads a configuration file (if any), applies flag overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(overrides.mode.ok_or_else(|| Error::Validation(vec!["mode is required".into()]))?),
    };
    cfg.apply(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_curvature_table(path: &Path) -> Result<CurvatureSpec> {
    fs::metadata(path).map_err(|e| Error::io(path, e))?;
    Ok(CurvatureSpec::Table(Arc::new(CurvatureTable::load(path)?)))
}

/// JSON report with a fixed key set plus the terminal `status`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub mode: String,
    pub status: String,
    pub config_echo: Value,
    pub homotopy_trace: Value,
    pub residuals: BTreeMap<String, f64>,
    pub monitors: Value,
    pub identity_checks: Value,
    pub timings: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn new(cfg: &RunConfig, status: impl Into<String>) -> Self {
        RunReport {
            mode: cfg.mode.as_str().into(),
            status: status.into(),
            config_echo: serde_json::to_value(cfg.effective()).unwrap_or(Value::Null),
            homotopy_trace: Value::Array(vec![]),
            residuals: BTreeMap::new(),
            monitors: Value::Null,
            identity_checks: Value::Object(Default::default()),
            timings: BTreeMap::new(),
            warnings: vec![],
        }
    }

    /// Copies trace, residuals, monitors and warnings from a solve.
    pub fn absorb(&mut self, r: &SolveReport) {
        self.homotopy_trace = serde_json::to_value(&r.homotopy_trace).unwrap_or(Value::Null);
        self.residuals.extend(r.residuals.iter().map(|(k, v)| (k.clone(), *v)));
        let mut mon = match &r.monitors {
            Some(m) => serde_json::to_value(m).unwrap_or(Value::Null),
            None => Value::Object(Default::default()),
        };
        if let Value::Object(map) = &mut mon {
            map.insert("iterate_checks".into(), serde_json::to_value(&r.iterate_checks).unwrap_or(Value::Null));
            map.insert("newton".into(), serde_json::to_value(&r.newton).unwrap_or(Value::Null));
        }
        self.monitors = mon;
        self.timings.insert("solve_s".into(), r.wall_time_s);
        for w in &r.warnings {
            if !self.warnings.contains(w) {
                self.warnings.push(w.clone());
            }
        }
    }

    pub fn to_json(&self) -> String {
        to_json_17(self)
    }
}

/// Formatter writing every float with 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        write!(w, "{:.16e}", f64::from(v))
    }
}

/// Serializes to JSON with 17-significant-digit floats; non-finite values become null.
pub fn to_json_17<T: Serialize>(v: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    v.serialize(&mut ser).expect("in-memory JSON serialization");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Column names after `node_index` and before `u`.
pub fn coordinate_columns(n: usize, d: usize) -> Vec<&'static str> {
    let mut c = Vec::new();
    if n >= 1 {
        c.push("x");
    }
    if n >= 2 {
        c.push("y");
    }
    if d == 2 {
        c.push("phi");
    }
    c.push("theta");
    c
}

pub fn solution_csv(u: &ScalarField) -> String {
    let g = u.grid();
    let cols = coordinate_columns(g.n(), g.d());
    let mut s = format!("node_index,{},u\n", cols.join(","));
    for (i, v) in u.values().iter().enumerate() {
        let c = g.coords(i);
        s.push_str(&i.to_string());
        for name in &cols {
            let x = match *name {
                "x" => c.x[0],
                "y" => c.x[1],
                "phi" => c.phi,
                _ => c.theta,
            };
            s.push_str(&format!(",{x:.16e}"));
        }
        s.push_str(&format!(",{v:.16e}\n"));
    }
    s
}

/// Reads a solution CSV back as (header, rows).
pub fn read_solution_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { location: path.display().to_string(), message: format!("{other:?}") },
    })?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { location: format!("{} header", path.display()), message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let loc = format!("{} row {}", path.display(), i + 1);
        let rec = rec.map_err(|e| Error::Parse { location: loc.clone(), message: e.to_string() })?;
        rows.push(
            rec.iter()
                .map(|f| f.parse().map_err(|e| Error::Parse { location: loc.clone(), message: format!("`{f}`: {e}") }))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok((header, rows))
}

/// OBJ of the embedded graph over each selected fiber: triangles for
/// surfaces, closed `l` polylines for curves.
pub fn solution_obj(u: &ScalarField, base_nodes: &[usize]) -> Result<String> {
    let g = u.grid();
    let meshes = embed_and_measure(u, base_nodes)?;
    let mut s = String::new();
    let mut offset = 1;
    for m in &meshes {
        s.push_str(&format!("o fiber_{}\n", m.base_node));
        for v in &m.vertices {
            if g.d() == 1 {
                s.push_str(&format!("v {:.16e} {:.16e} 0\n", v[0], v[1]));
            } else {
                s.push_str(&format!("v {:.16e} {:.16e} {:.16e}\n", v[0], v[1], v[2]));
            }
        }
        if g.d() == 1 {
            s.push('l');
            for i in 0..m.vertices.len() {
                s.push_str(&format!(" {}", offset + i));
            }
            s.push_str(&format!(" {offset}\n"));
        } else {
            let f = g.fiber();
            for t in sphere_faces(f.n_phi(), f.n_theta()) {
                s.push_str(&format!("f {} {} {}\n", t[0] + offset, t[1] + offset, t[2] + offset));
            }
        }
        offset += m.vertices.len();
    }
    Ok(s)
}

/// Vertices of an OBJ file.
pub fn read_obj_vertices(path: &Path) -> Result<Vec<[f64; 3]>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in s.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("v ") {
            let p: Vec<f64> = rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| Error::Parse { location: format!("{} line {}", path.display(), ln + 1), message: format!("{e}") }))
                .collect::<Result<_>>()?;
            if p.len() != 3 {
                return Err(Error::Parse { location: format!("{} line {}", path.display(), ln + 1), message: "expected 3 coordinates".into() });
            }
            out.push([p[0], p[1], p[2]]);
        }
    }
    Ok(out)
}

/// Paths written by [`emit_solution`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPaths {
    pub csv: PathBuf,
    pub obj: PathBuf,
    pub json: PathBuf,
}

impl OutputPaths {
    pub fn from_prefix(prefix: &str) -> Self {
        OutputPaths {
            csv: PathBuf::from(format!("{prefix}.csv")),
            obj: PathBuf::from(format!("{prefix}.obj")),
            json: PathBuf::from(format!("{prefix}.json")),
        }
    }
}

/// Writes the field CSV, the embedded mesh OBJ and the JSON report.
pub fn emit_solution(u: &ScalarField, report: &RunReport, paths: &OutputPaths, base_nodes: &[usize]) -> Result<()> {
    write_file(&paths.csv, &solution_csv(u))?;
    write_file(&paths.obj, &solution_obj(u, base_nodes)?)?;
    emit_report(report, &paths.json)
}

pub fn emit_report(report: &RunReport, path: &Path) -> Result<()> {
    write_file(path, &report.to_json())
}
