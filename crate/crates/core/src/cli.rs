//! Command-line front end: config schema, subcommand dispatch and artifact output.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cell::{homogenized_tensor, solve_correctors};
use crate::error::{Error, Result};
use crate::homog::{error_study, Gamma0, ProblemSpec, Shape, Source, StudyReport, Thresholds};
use crate::mesh::{build_cell_grid, build_domain_grid, Mesh, MatrixField, ScalarField};
use crate::periodize::defect_report;
use crate::sparse::SolverConfig;
use crate::unfold::{operator_estimates, unfold};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FLAGS: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "SolverSection::default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "SolverSection::default_max_iterations")]
    pub max_iterations: usize,
}

impl SolverSection {
    fn default_tolerance() -> f64 {
        SolverConfig::default().tolerance
    }

    fn default_max_iterations() -> usize {
        SolverConfig::default().max_iterations
    }

    pub fn to_config(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            deflate: false,
        }
    }
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            tolerance: Self::default_tolerance(),
            max_iterations: Self::default_max_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    #[serde(default = "StudySection::default_cells")]
    pub cells: Vec<usize>,
    #[serde(default = "StudySection::default_sub")]
    pub sub: usize,
    /// Defaults to `sub`.
    #[serde(default)]
    pub cell_divisions: Option<usize>,
    #[serde(default = "StudySection::default_q")]
    pub meyers_q: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Defaults depend on the shape.
    #[serde(default)]
    pub thresholds: Option<Thresholds>,
}

impl StudySection {
    fn default_cells() -> Vec<usize> {
        vec![4, 8, 16, 32]
    }

    fn default_sub() -> usize {
        16
    }

    fn default_q() -> f64 {
        4.0
    }
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            cells: Self::default_cells(),
            sub: Self::default_sub(),
            cell_divisions: None,
            meyers_q: Self::default_q(),
            alpha: None,
            thresholds: None,
        }
    }
}

/// Test function fed to the two-scale estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestField {
    /// `sin πx₁ sin πx₂`
    SinSin,
    /// Seeded trigonometric polynomial, see [`seeded_field`].
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoScaleSection {
    #[serde(default = "TwoScaleSection::default_cells")]
    pub cells: Vec<usize>,
    #[serde(default = "TwoScaleSection::default_sub")]
    pub sub: usize,
    #[serde(default = "TwoScaleSection::default_y")]
    pub y_resolution: usize,
    #[serde(default = "TwoScaleSection::default_field")]
    pub field: TestField,
    /// Macro-cells of the finest ε whose unfolded slices are dumped.
    #[serde(default = "TwoScaleSection::default_dump")]
    pub dump_cells: Vec<[usize; 2]>,
}

impl TwoScaleSection {
    fn default_cells() -> Vec<usize> {
        vec![4, 8, 16]
    }

    fn default_sub() -> usize {
        8
    }

    fn default_y() -> usize {
        4
    }

    fn default_field() -> TestField {
        TestField::SinSin
    }

    fn default_dump() -> Vec<[usize; 2]> {
        vec![[0, 0]]
    }
}

impl Default for TwoScaleSection {
    fn default() -> Self {
        TwoScaleSection {
            cells: Self::default_cells(),
            sub: Self::default_sub(),
            y_resolution: Self::default_y(),
            field: Self::default_field(),
            dump_cells: Self::default_dump(),
        }
    }
}

/// On-disk configuration. Every omitted field takes its default; the echo
/// written next to the artifacts has all of them filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "Config::default_shape")]
    pub shape: Shape,
    pub coefficient: String,
    #[serde(default = "Config::default_source")]
    pub source: Source,
    #[serde(default = "default_scale")]
    pub source_scale: f64,
    #[serde(default = "Config::default_gamma0")]
    pub gamma0: Gamma0,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default)]
    pub twoscale: TwoScaleSection,
}

impl Config {
    fn default_shape() -> Shape {
        Shape::UnitSquare
    }

    fn default_source() -> Source {
        Source::Constant
    }

    fn default_gamma0() -> Gamma0 {
        Gamma0::Full
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg.split('`').nth(1).unwrap_or("config").to_string();
            Error::Config { field, reason: msg }
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn coefficient_field(&self) -> Result<MatrixField> {
        self.coefficient
            .parse()
            .map_err(|e: Error| Error::config("coefficient", e.to_string()))
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let cfg = self.solver.to_config();
        cfg.validate()?;
        Ok(cfg)
    }

    /// The validated study problem described by this config.
    pub fn problem(&self) -> Result<ProblemSpec> {
        let mut spec = ProblemSpec::new(
            self.shape,
            self.coefficient_field()?,
            self.source,
            self.gamma0,
            self.study.cells.clone(),
            self.study.sub,
        );
        spec.source_scale = self.source_scale;
        spec.cell_divisions = self.study.cell_divisions.unwrap_or(self.study.sub);
        spec.solver = self.solver_config()?;
        spec.meyers_q = self.study.meyers_q;
        spec.alpha = self.study.alpha;
        if let Some(th) = self.study.thresholds {
            spec.thresholds = th;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Parser)]
#[command(name = "homog", version, about = "Periodic homogenization: correctors, error studies and unfolding estimates")]
pub struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; the HOMOG_OUT environment variable takes precedence.
    #[arg(long, global = true, default_value = "homog-out")]
    pub out: PathBuf,
    /// Worker threads for data-parallel loops.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single worker; outputs are bit-identical across runs.
    #[arg(long, global = true)]
    pub serial: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cell correctors and the homogenized tensor.
    Correctors,
    /// Convergence study over the configured ε ladder.
    Study,
    /// Operator-estimate ratios and unfolded cell slices.
    Twoscale,
    /// Periodicity defects of a cell field read from a VTK dump.
    Defect {
        #[arg(long)]
        field: PathBuf,
        /// Print the CSV header line first.
        #[arg(long)]
        header: bool,
    },
}

/// An error tagged with the stage that produced it.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        if self.error.is_numeric() {
            EXIT_NUMERIC
        } else {
            EXIT_CONFIG
        }
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("homog: {} failed: {}", f.stage, f.error);
            f.exit_code()
        }
    }
}

pub fn output_dir(flag: &Path) -> PathBuf {
    std::env::var_os("HOMOG_OUT")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| flag.to_path_buf())
}

pub fn run(cli: &Cli) -> std::result::Result<i32, Failure> {
    let workers = if cli.serial { Some(1) } else { cli.workers };
    if workers == Some(0) {
        return Err(Failure {
            stage: "setup",
            error: Error::config("--workers", "must be at least 1"),
        });
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config("--workers", e.to_string()))
        .stage("setup")?;
    pool.install(|| dispatch(cli))
}

fn load_config(cli: &Cli, required: bool) -> std::result::Result<Option<Config>, Failure> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path).stage("config")?,
        None if required => {
            return Err(Failure {
                stage: "config",
                error: Error::config("--config", "this subcommand needs a config file"),
            })
        }
        None => return Ok(None),
    };
    Ok(Some(match cli.seed {
        Some(seed) => Config { seed, ..cfg },
        None => cfg,
    }))
}

fn prepare_out(cli: &Cli, cfg: &Config) -> std::result::Result<PathBuf, Failure> {
    let out = output_dir(&cli.out);
    fs::create_dir_all(&out).map_err(Error::from).stage("output")?;
    write_json(&out.join("config.json"), cfg).stage("output")?;
    Ok(out)
}

fn dispatch(cli: &Cli) -> std::result::Result<i32, Failure> {
    match &cli.command {
        Command::Correctors => {
            let cfg = load_config(cli, true)?.expect("required");
            let a = cfg.coefficient_field().stage("config")?;
            let solver = cfg.solver_config().stage("config")?;
            let m = cfg.study.cell_divisions.unwrap_or(cfg.study.sub);
            let out = prepare_out(cli, &cfg)?;
            run_correctors(&a, m, &solver, &out)?;
            Ok(EXIT_PASS)
        }
        Command::Study => {
            let cfg = load_config(cli, true)?.expect("required");
            let spec = cfg.problem().stage("config")?;
            let out = prepare_out(cli, &cfg)?;
            let report = error_study(&spec).stage("study")?;
            fs::write(out.join("errors.csv"), study_csv(&report))
                .map_err(Error::from)
                .stage("output")?;
            let summary = json!({ "config": cfg, "report": report, "pass": report.pass });
            write_json(&out.join("summary.json"), &summary).stage("output")?;
            for row in &report.rows {
                for w in &row.warnings {
                    eprintln!("homog: ε = {}: {w}", row.eps);
                }
            }
            Ok(if report.pass { EXIT_PASS } else { EXIT_FLAGS })
        }
        Command::Twoscale => {
            let cfg = load_config(cli, true)?.expect("required");
            let solver = cfg.solver_config().stage("config")?;
            let out = prepare_out(cli, &cfg)?;
            run_twoscale(&cfg, &solver, &out)?;
            Ok(EXIT_PASS)
        }
        Command::Defect { field, header } => {
            let solver = match load_config(cli, false)? {
                Some(cfg) => cfg.solver_config().stage("config")?,
                None => SolverConfig::default(),
            };
            let phi = read_cell_vtk(field).stage("read field")?;
            let report = defect_report(&phi, &solver).stage("defect")?;
            let dim = phi.mesh().dim();
            if *header {
                let mut cols: Vec<String> = (1..=dim).map(|j| format!("defect_{j}")).collect();
                cols.push("lift_distance".into());
                cols.push("projection_distance".into());
                println!("{}", cols.join(","));
            }
            let mut cols: Vec<String> = report.face_defects.iter().map(|d| d.to_string()).collect();
            cols.push(report.lift_distance.to_string());
            cols.push(report.projection_distance.to_string());
            println!("{}", cols.join(","));
            Ok(EXIT_PASS)
        }
    }
}

fn run_correctors(a: &MatrixField, m: usize, solver: &SolverConfig, out: &Path) -> std::result::Result<(), Failure> {
    let grid = build_cell_grid(2, m).stage("correctors")?;
    let set = solve_correctors(a, &grid, solver).stage("correctors")?;
    let tensor = homogenized_tensor(a, &set);
    for (i, chi) in set.correctors().iter().enumerate() {
        let name = format!("chi_{}", i + 1);
        write_vtk(&out.join(format!("{name}.vtk")), chi, &name).stage("output")?;
    }
    let doc = json!({
        "coefficient": a.to_string(),
        "dim": tensor.dim(),
        "divisions": m,
        "matrix": tensor.matrix(),
        "eigenvalues": tensor.eigenvalues(),
        "residuals": set.residuals(),
        "iterations": set.iterations(),
    });
    write_json(&out.join("tensor.json"), &doc).stage("output")
}

fn run_twoscale(cfg: &Config, solver: &SolverConfig, out: &Path) -> std::result::Result<(), Failure> {
    let ts = &cfg.twoscale;
    if ts.cells.is_empty() {
        return Err(Failure {
            stage: "config",
            error: Error::config("twoscale.cells", "at least one ε value is required"),
        });
    }
    if ts.y_resolution < 2 {
        return Err(Failure {
            stage: "config",
            error: Error::config("twoscale.y_resolution", "must be at least 2"),
        });
    }
    let mut csv = String::from("eps,ratio_mean,ratio_mean_hm1,ratio_unfold,ratio_q_mean,ratio_defect,ratio_hat\n");
    let mut finest = None;
    for &n in &ts.cells {
        let mask = cfg.shape.mask(n).stage("config")?;
        let grid = build_domain_grid(mask, ts.sub).stage("config")?;
        let phi = match ts.field {
            TestField::SinSin => ScalarField::from_fn(grid.mesh().clone(), |x| {
                (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin()
            }),
            TestField::Random => seeded_field(grid.mesh(), cfg.seed),
        };
        let est = operator_estimates(&grid, &phi, ts.y_resolution, solver).stage("twoscale")?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            est.eps,
            est.ratio_mean(),
            est.ratio_mean_hm1(),
            est.ratio_unfold(),
            est.ratio_q_mean(),
            est.ratio_defect(),
            est.ratio_hat()
        );
        if finest.as_ref().is_none_or(|(g, _): &(crate::mesh::DomainGrid, _)| g.cells_per_axis() < n) {
            finest = Some((grid, phi));
        }
    }
    fs::write(out.join("twoscale.csv"), csv).map_err(Error::from).stage("output")?;

    let (grid, phi) = finest.expect("non-empty ladder");
    let u = unfold(&grid, &phi, ts.y_resolution).stage("twoscale")?;
    let mut entries = Vec::new();
    for &cell in &ts.dump_cells {
        let Some(k) = u.position(cell) else {
            return Err(Failure {
                stage: "config",
                error: Error::config("twoscale.dump_cells", format!("cell {cell:?} is not an active cell")),
            });
        };
        let file = format!("cell_{}_{}.vtk", cell[0], cell[1]);
        write_vtk(&out.join(&file), &u.column_field(k), "unfolded").stage("output")?;
        entries.push(json!({ "cell": cell, "file": file }));
    }
    let index = json!({
        "eps": grid.eps(),
        "y_resolution": ts.y_resolution,
        "cells": entries,
    });
    write_json(&out.join("index.json"), &index).stage("output")
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|s| s.to_string()).unwrap_or_default()
}

/// CSV of the study rows; absent slopes are empty fields.
pub fn study_csv(report: &StudyReport) -> String {
    let mut s = String::from("eps,h,l2_err,h1_corr_err,h1_plain_err,slope_l2,slope_h1,cg_iters,seconds\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.eps,
            r.h,
            r.l2_err,
            r.h1_corr_err,
            r.h1_plain_err,
            fmt_opt(r.slope_l2),
            fmt_opt(r.slope_h1),
            r.cg_iters,
            r.seconds
        );
    }
    s
}

/// Smooth random field `Σ c_kl cos(kπx₁ + a) cos(lπx₂ + b)` with `k, l ≤ 3`.
pub fn seeded_field(mesh: &std::sync::Arc<Mesh>, seed: u64) -> ScalarField {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(f64, f64, f64, f64, f64)> = (0..16)
        .map(|t| {
            let (k, l) = ((t % 4) as f64, (t / 4) as f64);
            let c = rng.gen_range(-1.0..1.0) / (1.0 + k * k + l * l);
            (k, l, c, rng.gen_range(0.0..PI), rng.gen_range(0.0..PI))
        })
        .collect();
    let dim = mesh.dim();
    ScalarField::from_fn(mesh.clone(), |x| {
        terms
            .iter()
            .filter(|t| dim == 2 || t.1 == 0.0)
            .map(|&(k, l, c, a, b)| c * (k * PI * x[0] + a).cos() * (l * PI * x[1] + b).cos())
            .sum()
    })
}

/// Legacy VTK structured-points text; lattice points outside the mesh are NaN.
pub fn write_vtk(path: &Path, field: &ScalarField, name: &str) -> Result<()> {
    let mesh = field.mesh();
    let l = mesh.divisions();
    let ny = if mesh.dim() == 2 { l + 1 } else { 1 };
    let h = mesh.h();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{name}");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} 1", l + 1, ny);
    let _ = writeln!(s, "ORIGIN 0 0 0");
    let _ = writeln!(s, "SPACING {h} {} 1", if ny > 1 { h } else { 1.0 });
    let _ = writeln!(s, "POINT_DATA {}", (l + 1) * ny);
    let _ = writeln!(s, "SCALARS {name} double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for j in 0..ny {
        for i in 0..=l {
            let v = mesh.node_at([i, j]).map_or(f64::NAN, |n| field.values()[n]);
            let _ = writeln!(s, "{v}");
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a field on the unit cell written by [`write_vtk`] (or any legacy
/// structured-points file with a square lattice spanning `[0,1]^n`).
pub fn read_cell_vtk(path: &Path) -> Result<ScalarField> {
    let text = fs::read_to_string(path)?;
    parse_cell_vtk(&text)
}

pub fn parse_cell_vtk(text: &str) -> Result<ScalarField> {
    let bad = |m: &str| Error::Dump(m.to_string());
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if !lines.next().is_some_and(|l| l.starts_with("# vtk DataFile")) {
        return Err(bad("missing `# vtk DataFile` header"));
    }
    lines.next().ok_or_else(|| bad("missing title line"))?;
    if lines.next() != Some("ASCII") {
        return Err(bad("only ASCII files are supported"));
    }
    if lines.next() != Some("DATASET STRUCTURED_POINTS") {
        return Err(bad("expected DATASET STRUCTURED_POINTS"));
    }
    let mut dims: Option<[usize; 3]> = None;
    let mut count = None;
    for line in lines.by_ref() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("DIMENSIONS") => {
                let d: Vec<usize> = it
                    .map(|t| t.parse().map_err(|_| bad("non-integer DIMENSIONS")))
                    .collect::<Result<_>>()?;
                if d.len() != 3 {
                    return Err(bad("DIMENSIONS needs three values"));
                }
                dims = Some([d[0], d[1], d[2]]);
            }
            Some("POINT_DATA") => {
                count = Some(
                    it.next()
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| bad("bad POINT_DATA"))?,
                );
            }
            Some("LOOKUP_TABLE") => break,
            Some("ORIGIN" | "SPACING" | "SCALARS") => {}
            Some(other) => return Err(Error::Dump(format!("unexpected keyword `{other}`"))),
            None => {}
        }
    }
    let [nx, ny, nz] = dims.ok_or_else(|| bad("missing DIMENSIONS"))?;
    if nz != 1 || nx < 3 || !(ny == 1 || ny == nx) {
        return Err(bad("expected an (m+1)×(m+1)×1 or (m+1)×1×1 lattice with m ≥ 2"));
    }
    let total = nx * ny;
    if count.is_some_and(|c| c != total) {
        return Err(bad("POINT_DATA does not match DIMENSIONS"));
    }
    let values: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|_| Error::Dump(format!("bad value `{t}`"))))
        .collect::<Result<_>>()?;
    if values.len() != total {
        return Err(Error::Dump(format!("expected {total} values, found {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    let dim = if ny == 1 { 1 } else { 2 };
    let grid = build_cell_grid(dim, nx - 1)?;
    ScalarField::new(grid.mesh().clone(), values)
}
