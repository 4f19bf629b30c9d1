//! Oscillatory and homogenized solves, the cutoff corrector approximation and
//! error-rate studies over a ladder of ε.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{homogenized_tensor, solve_correctors, CorrectorSet, HomogenizedTensor};
use crate::error::{Error, Result};
use crate::mesh::{build_cell_grid, build_domain_grid, CellMask, DomainGrid, Mat2, MatrixField, Point, ScalarField, VectorField};
use crate::norms::{l2_norm, PoissonRiesz};
use crate::sparse::{assemble_load, assemble_stiffness, cg_solve, BoundaryCondition, SolverConfig};
use crate::unfold::{cell_means_quad, q_interp_means};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    UnitSquare,
    /// Unit square minus its upper-right quadrant.
    LShape,
}

impl Shape {
    pub fn mask(&self, n_cells: usize) -> Result<CellMask> {
        match self {
            Shape::UnitSquare => Ok(CellMask::full(2, n_cells)),
            Shape::LShape => CellMask::l_shape(n_cells),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// `f = 1`
    Constant,
    /// `f = 2π² sin πx₁ sin πx₂`
    Manufactured,
    /// `f = sin 2πx₁`
    Sin2PiX1,
}

impl Source {
    pub fn eval(&self, x: Point) -> f64 {
        use std::f64::consts::PI;
        match self {
            Source::Constant => 1.0,
            Source::Manufactured => 2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin(),
            Source::Sin2PiX1 => (2.0 * PI * x[0]).sin(),
        }
    }
}

/// The part of the boundary carrying the homogeneous Dirichlet condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma0 {
    Full,
    Empty,
}

impl Gamma0 {
    fn boundary_condition(&self) -> BoundaryCondition {
        match self {
            Gamma0::Full => BoundaryCondition::Dirichlet,
            Gamma0::Empty => BoundaryCondition::Neumann,
        }
    }
}

/// Pass criteria of a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub min_h1_slope: f64,
    #[serde(default)]
    pub max_h1_slope: Option<f64>,
    #[serde(default)]
    pub min_l2_slope: Option<f64>,
    /// Every consecutive-pair slope of the corrected-gradient error must be positive.
    #[serde(default)]
    pub pairwise_positive: bool,
}

impl Thresholds {
    pub fn for_shape(shape: Shape) -> Self {
        match shape {
            Shape::UnitSquare => Thresholds {
                min_h1_slope: 0.4,
                max_h1_slope: Some(1.2),
                min_l2_slope: Some(0.4),
                pairwise_positive: false,
            },
            Shape::LShape => Thresholds {
                min_h1_slope: 0.2,
                max_h1_slope: None,
                min_l2_slope: None,
                pairwise_positive: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub shape: Shape,
    pub coefficient: MatrixField,
    pub source: Source,
    pub source_scale: f64,
    pub gamma0: Gamma0,
    /// ε-cells per axis for every study row (`ε = 1/N`).
    pub cells: Vec<usize>,
    /// Fine elements per ε-cell and axis.
    pub sub: usize,
    /// Cell-grid divisions for the correctors.
    pub cell_divisions: usize,
    pub solver: SolverConfig,
    pub meyers_q: f64,
    /// Cutoff exponent; `None` picks 1 on the square and `2q/(3q−2)` on the L-shape.
    pub alpha: Option<f64>,
    pub thresholds: Thresholds,
}

impl ProblemSpec {
    pub fn new(shape: Shape, coefficient: MatrixField, source: Source, gamma0: Gamma0, cells: Vec<usize>, sub: usize) -> Self {
        ProblemSpec {
            shape,
            coefficient,
            source,
            source_scale: 1.0,
            gamma0,
            cells,
            sub,
            cell_divisions: sub,
            solver: SolverConfig::default(),
            meyers_q: 4.0,
            alpha: None,
            thresholds: Thresholds::for_shape(shape),
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.shape {
            Shape::UnitSquare => 1.0,
            Shape::LShape => 2.0 * self.meyers_q / (3.0 * self.meyers_q - 2.0),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::config("study.cells", "at least one ε value is required"));
        }
        for &n in &self.cells {
            if n < 2 || !n.is_power_of_two() {
                return Err(Error::config("study.cells", format!("{n} is not a power of two ≥ 2")));
            }
            if self.shape == Shape::LShape && n % 2 != 0 {
                return Err(Error::config("study.cells", "the L-shape needs an even cell count"));
            }
        }
        if self.sub < 2 {
            return Err(Error::config("study.sub", "must be at least 2"));
        }
        if self.cell_divisions < 2 || !self.sub.is_multiple_of(self.cell_divisions) {
            return Err(Error::config("study.cell_divisions", "must be at least 2 and divide `sub`"));
        }
        if !self.cell_divisions.is_multiple_of(self.coefficient.alignment()) {
            return Err(Error::config("coefficient", "discontinuities must fall on cell-grid element faces"));
        }
        if self.meyers_q.is_nan() || self.meyers_q <= 2.0 {
            return Err(Error::config("study.meyers_q", "must exceed 2"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config("study.alpha", "must lie in (0, 1]"));
            }
        }
        if !(self.source_scale.is_finite()) {
            return Err(Error::config("source_scale", "must be finite"));
        }
        self.solver.validate()
    }

    pub fn domain(&self, n_cells: usize) -> Result<DomainGrid> {
        build_domain_grid(self.shape.mask(n_cells)?, self.sub)
    }

    /// Source values at the fine quadrature points, mean-free when `Γ₀ = ∅`.
    fn source_at_quadrature(&self, grid: &DomainGrid) -> Vec<f64> {
        let mesh = grid.mesh();
        let nq = mesh.quadrature().len();
        let mut vals = Vec::with_capacity(mesh.num_elements() * nq);
        for e in 0..mesh.num_elements() {
            for q in 0..nq {
                vals.push(self.source_scale * self.source.eval(mesh.quad_point(e, q)));
            }
        }
        if self.gamma0 == Gamma0::Empty {
            let area = mesh.integrate(&vec![1.0; vals.len()]);
            let mean = mesh.integrate(&vals) / area;
            vals.iter_mut().for_each(|v| *v -= mean);
        }
        vals
    }
}

/// A Galerkin solution with its solver statistics.
#[derive(Debug, Clone)]
pub struct Solution {
    pub field: ScalarField,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn solve_elliptic(spec: &ProblemSpec, grid: &DomainGrid, coeff: impl Fn(Point) -> Mat2 + Sync) -> Result<Solution> {
    let mesh = grid.mesh();
    let bc = spec.gamma0.boundary_condition();
    let sys = assemble_stiffness(mesh, |_, x| coeff(x), bc);
    let f = spec.source_at_quadrature(grid);
    let nq = mesh.quadrature().len();
    let load = assemble_load(mesh, |e, q, _| (f[e * nq + q], [0.0, 0.0]));
    let b = sys.dofs.fold(&load);
    let cfg = spec.solver.with_deflation(bc == BoundaryCondition::Neumann);
    let (x, stats) = cg_solve(&sys.operator, &b, &cfg)?;
    let mut field = ScalarField::new(mesh.clone(), sys.dofs.expand(&x))?;
    if bc == BoundaryCondition::Neumann {
        let area = mesh.integrate(&vec![1.0; mesh.num_elements() * nq]);
        let mean = field.integral() / area;
        field.values_mut().iter_mut().for_each(|v| *v -= mean);
    }
    Ok(Solution {
        field,
        iterations: stats.iterations,
        relative_residual: stats.relative_residual,
    })
}

/// `φ^ε` with `A({x/ε})` sampled at every quadrature point of `grid`.
pub fn solve_oscillatory(spec: &ProblemSpec, grid: &DomainGrid, eps: f64) -> Result<Solution> {
    let a = spec.coefficient;
    let inv = 1.0 / eps;
    solve_elliptic(spec, grid, |x| a.sample([x[0] * inv, x[1] * inv]))
}

/// `Φ` for the constant tensor `𝒜`.
pub fn solve_homogenized(spec: &ProblemSpec, grid: &DomainGrid, tensor: &HomogenizedTensor) -> Result<Solution> {
    let m = tensor.matrix();
    solve_elliptic(spec, grid, |_| m)
}

/// Nodal `min(dist(x, ∂Ω)/ε^α, 1)`.
pub fn cutoff_rho_eps(grid: &DomainGrid, eps: f64, alpha: f64) -> Result<ScalarField> {
    let mesh = grid.mesh().clone();
    let scale = eps.powf(alpha);
    let values = (0..mesh.num_nodes())
        .map(|n| grid.distance_to_boundary(mesh.node_coords(n)).map(|d| (d / scale).min(1.0)))
        .collect::<Result<Vec<f64>>>()?;
    ScalarField::new(mesh, values)
}

/// `Q_ε(∂Φ/∂x_i)` for every direction.
fn q_of_gradient(grid: &DomainGrid, big: &ScalarField) -> Vec<ScalarField> {
    let grads = big.gradient();
    (0..grid.dim())
        .map(|i| {
            let comp: Vec<f64> = grads.values().iter().map(|g| g[i]).collect();
            q_interp_means(grid, &cell_means_quad(grid, &comp))
        })
        .collect()
}

/// `Φ + Σ ε ρ_{ε,α} Q_ε(∂_iΦ) χ_i({x/ε})` and the comparator `∇Φ + Σ Q_ε(∂_iΦ) ∇_yχ_i({x/ε})`.
///
/// `grid` fixes ε through its cell size; the corrector grid must divide its fine resolution.
pub fn first_order_approx(
    grid: &DomainGrid,
    big: &ScalarField,
    correctors: &CorrectorSet,
    alpha: f64,
) -> Result<(ScalarField, VectorField)> {
    let m = correctors.grid().divisions();
    if !grid.sub().is_multiple_of(m) {
        return Err(Error::ResolutionMismatch(format!(
            "corrector grid {m} does not divide {} fine elements per cell",
            grid.sub()
        )));
    }
    if !big.mesh().same_layout(grid.mesh()) {
        return Err(Error::ResolutionMismatch("Φ does not live on the domain grid".into()));
    }
    let eps = grid.eps();
    let mesh = grid.mesh().clone();
    let q = q_of_gradient(grid, big);
    let rho = cutoff_rho_eps(grid, eps, alpha)?;
    let cmesh = correctors.grid().mesh().clone();

    let mut field = big.clone();
    for node in 0..mesh.num_nodes() {
        let (_, y) = grid.split_node(node);
        let mut corr = 0.0;
        for (i, qi) in q.iter().enumerate() {
            let chi = correctors.corrector(i).evaluate(y).expect("y in cell");
            corr += qi.values()[node] * chi;
        }
        field.values_mut()[node] += eps * rho.values()[node] * corr;
    }

    let nq = mesh.quadrature().len();
    let grad_big = big.gradient();
    let q_at: Vec<Vec<f64>> = q.iter().map(|f| f.at_quadrature()).collect();
    let mut comparator = Vec::with_capacity(mesh.num_elements() * nq);
    for e in 0..mesh.num_elements() {
        for qq in 0..nq {
            let idx = e * nq + qq;
            let y = grid.local_y(e, mesh.quadrature().points[qq]);
            let (ce, local) = cmesh.locate(y).expect("y in cell");
            let mut g = grad_big.values()[idx];
            for (i, qi) in q_at.iter().enumerate() {
                let gc = correctors.gradient(i, ce, local);
                g[0] += qi[idx] * gc[0];
                g[1] += qi[idx] * gc[1];
            }
            comparator.push(g);
        }
    }
    Ok((field, VectorField::new(mesh, comparator)?))
}

/// Prolongation of a field on a coarser nested grid to the nodes of `fine`.
pub fn prolongate(coarse: &ScalarField, fine: &DomainGrid) -> Result<ScalarField> {
    let mesh = fine.mesh().clone();
    let values = (0..mesh.num_nodes())
        .map(|n| {
            let x = mesh.node_coords(n);
            coarse
                .evaluate(x)
                .ok_or_else(|| Error::ResolutionMismatch(format!("node {x:?} outside the coarse grid")))
        })
        .collect::<Result<Vec<f64>>>()?;
    ScalarField::new(mesh, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub eps: f64,
    pub h: f64,
    pub l2_err: f64,
    pub h1_corr_err: f64,
    pub h1_plain_err: f64,
    /// `‖φ^ε − Φ‖_{H⁻¹}`
    pub hm1_err: f64,
    /// `‖∇(φ^ε − first-order approximation)‖`
    pub h1_approx_err: f64,
    pub slope_l2: Option<f64>,
    pub slope_h1: Option<f64>,
    pub cg_iters: usize,
    pub seconds: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fits {
    pub l2: Option<f64>,
    pub h1_corr: Option<f64>,
    pub h1_plain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub h1_slope_ok: bool,
    pub l2_slope_ok: bool,
    pub pairwise_positive_ok: bool,
    pub corrector_improves: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub fits: Fits,
    pub alpha: f64,
    pub meyers_q: f64,
    pub tensor: Mat2,
    pub corrector_residuals: Vec<f64>,
    pub homogenized_iterations: usize,
    pub flags: Flags,
    pub pass: bool,
}

/// Least-squares slope of `log err` against `log ε`.
pub fn fit_slope(eps: &[f64], err: &[f64]) -> Option<f64> {
    if eps.len() < 2 || err.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return None;
    }
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn pair_slope(e0: f64, e1: f64, r0: f64, r1: f64) -> Option<f64> {
    (r0 > 0.0 && r1 > 0.0).then(|| (r1 / r0).ln() / (e1 / e0).ln())
}

fn grad_distance(a: &VectorField, b: &VectorField) -> f64 {
    a.l2_distance(b)
}

/// Runs every row of the ε ladder and fits convergence rates.
pub fn error_study(spec: &ProblemSpec) -> Result<StudyReport> {
    spec.validate()?;
    let mut ladder = spec.cells.clone();
    ladder.sort_unstable();
    ladder.dedup();
    let n_max = *ladder.last().expect("non-empty ladder");
    let finest = spec.domain(n_max)?;
    let alpha = spec.effective_alpha();

    let cell_grid = build_cell_grid(2, spec.cell_divisions)?;
    let correctors = solve_correctors(&spec.coefficient, &cell_grid, &spec.solver)?;
    let tensor = homogenized_tensor(&spec.coefficient, &correctors);
    let homog = solve_homogenized(spec, &finest, &tensor)?;
    let big = &homog.field;
    let grad_big = big.gradient();
    let riesz = PoissonRiesz::new(finest.mesh().clone(), &spec.solver);

    let mut rows: Vec<StudyRow> = ladder
        .par_iter()
        .map(|&n| -> Result<StudyRow> {
            let start = Instant::now();
            let grid = spec.domain(n)?;
            let eps = grid.eps();
            let osc = solve_oscillatory(spec, &grid, eps)?;
            let phi = prolongate(&osc.field, &finest)?;
            let view = finest.with_cells(spec.shape.mask(n)?)?;
            let (approx, comparator) = first_order_approx(&view, big, &correctors, alpha)?;
            let grad_phi = phi.gradient();
            let diff = phi.sub(big);
            let mut warnings = Vec::new();
            if spec.sub < 8 {
                warnings.push(format!("under-resolved oscillation: {} fine cells per ε-cell", spec.sub));
            }
            Ok(StudyRow {
                eps,
                h: grid.h(),
                l2_err: l2_norm(&diff),
                h1_corr_err: grad_distance(&grad_phi, &comparator),
                h1_plain_err: grad_distance(&grad_phi, &grad_big),
                hm1_err: riesz.norm(&diff)?,
                h1_approx_err: grad_distance(&grad_phi, &approx.gradient()),
                slope_l2: None,
                slope_h1: None,
                cg_iters: osc.iterations,
                seconds: start.elapsed().as_secs_f64(),
                warnings,
            })
        })
        .collect::<Result<_>>()?;
    // coarse to fine: decreasing ε
    rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));

    let (c, big_c) = spec.coefficient.bounds();
    let tiny = rows.iter().any(|r| r.h1_corr_err <= 1e-12 || r.l2_err <= 1e-14);
    let degenerate = c == big_c || tiny;
    if !degenerate {
        for i in 1..rows.len() {
            let (e0, e1) = (rows[i - 1].eps, rows[i].eps);
            rows[i].slope_l2 = pair_slope(e0, e1, rows[i - 1].l2_err, rows[i].l2_err);
            rows[i].slope_h1 = pair_slope(e0, e1, rows[i - 1].h1_corr_err, rows[i].h1_corr_err);
        }
    }
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let fit = |f: fn(&StudyRow) -> f64| -> Option<f64> {
        if degenerate || rows.len() < 3 {
            return None;
        }
        fit_slope(&eps, &rows.iter().map(f).collect::<Vec<_>>())
    };
    let fits = Fits {
        l2: fit(|r| r.l2_err),
        h1_corr: fit(|r| r.h1_corr_err),
        h1_plain: fit(|r| r.h1_plain_err),
    };

    let th = &spec.thresholds;
    let h1_slope_ok = fits
        .h1_corr
        .is_some_and(|s| s >= th.min_h1_slope && th.max_h1_slope.is_none_or(|m| s <= m));
    let l2_slope_ok = match th.min_l2_slope {
        None => true,
        Some(min) => fits.l2.is_some_and(|s| s >= min),
    };
    let pairwise_positive_ok =
        !th.pairwise_positive || (!degenerate && rows.iter().skip(1).all(|r| r.slope_h1.is_some_and(|s| s > 0.0)));
    let corrector_improves = rows.iter().all(|r| r.h1_corr_err < r.h1_plain_err);
    let pass = h1_slope_ok && l2_slope_ok && pairwise_positive_ok;

    Ok(StudyReport {
        rows,
        fits,
        alpha,
        meyers_q: spec.meyers_q,
        tensor: tensor.matrix(),
        corrector_residuals: correctors.residuals().to_vec(),
        homogenized_iterations: homog.iterations,
        flags: Flags {
            h1_slope_ok,
            l2_slope_ok,
            pairwise_positive_ok,
            corrector_improves,
            degenerate,
        },
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn spec(coef: &str, source: Source, gamma0: Gamma0, cells: Vec<usize>, sub: usize) -> ProblemSpec {
        ProblemSpec::new(Shape::UnitSquare, coef.parse().unwrap(), source, gamma0, cells, sub)
    }

    #[test]
    fn manufactured_solution() {
        let s = spec("identity", Source::Manufactured, Gamma0::Full, vec![16], 4);
        let grid = s.domain(16).unwrap();
        let exact = ScalarField::from_fn(grid.mesh().clone(), |x| (PI * x[0]).sin() * (PI * x[1]).sin());
        let osc = solve_oscillatory(&s, &grid, grid.eps()).unwrap();
        assert!(l2_norm(&osc.field.sub(&exact)) < 2e-4);
        let hom = solve_homogenized(&s, &grid, &HomogenizedTensor::identity(2)).unwrap();
        assert!(l2_norm(&hom.field.sub(&exact)) < 2e-4);
    }

    #[test]
    fn zero_source_gives_zero() {
        let mut s = spec("laminate(1,4)", Source::Constant, Gamma0::Full, vec![4], 4);
        s.source_scale = 0.0;
        let grid = s.domain(4).unwrap();
        let osc = solve_oscillatory(&s, &grid, grid.eps()).unwrap();
        assert!(osc.field.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn galerkin_energy_identity() {
        let s = spec("laminate(1,4)", Source::Constant, Gamma0::Full, vec![4], 8);
        let grid = s.domain(4).unwrap();
        let eps = grid.eps();
        let osc = solve_oscillatory(&s, &grid, eps).unwrap();
        let phi = &osc.field;
        let mesh = grid.mesh();
        let g = phi.gradient();
        let vals = phi.at_quadrature();
        let nq = mesh.quadrature().len();
        let (mut energy, mut work) = (0.0, 0.0);
        for e in 0..mesh.num_elements() {
            for q in 0..nq {
                let x = mesh.quad_point(e, q);
                let a = s.coefficient.scalar([x[0] / eps, x[1] / eps]);
                let v = g.values()[e * nq + q];
                energy += mesh.quad_weight(q) * a * (v[0] * v[0] + v[1] * v[1]);
                work += mesh.quad_weight(q) * vals[e * nq + q];
            }
        }
        assert!((energy - work).abs() <= 1e-9 * work);
    }

    #[test]
    fn homogenized_solution_is_symmetric() {
        let s = spec("laminate(1,4)", Source::Constant, Gamma0::Full, vec![4], 4);
        let grid = s.domain(4).unwrap();
        let t = HomogenizedTensor::new(2, [[1.6, 0.0], [0.0, 2.5]]);
        let hom = solve_homogenized(&s, &grid, &t).unwrap();
        let mesh = grid.mesh();
        let l = mesh.divisions();
        for node in 0..mesh.num_nodes() {
            let [i, j] = mesh.node_lattice(node);
            let v = hom.field.values()[node];
            let mx = hom.field.values()[mesh.node_at([l - i, j]).unwrap()];
            let my = hom.field.values()[mesh.node_at([i, l - j]).unwrap()];
            assert!((v - mx).abs() <= 1e-8 * v.abs().max(1e-3));
            assert!((v - my).abs() <= 1e-8 * v.abs().max(1e-3));
        }
    }

    #[test]
    fn cutoff_examples() {
        let grid = build_domain_grid(CellMask::full(2, 4), 4).unwrap();
        let eps = grid.eps();
        let rho = cutoff_rho_eps(&grid, eps, 1.0).unwrap();
        let mesh = grid.mesh();
        for n in 0..mesh.num_nodes() {
            let x = mesh.node_coords(n);
            let v = rho.values()[n];
            if mesh.is_boundary_node(n) {
                assert_eq!(v, 0.0);
            }
            if x == [0.125, 0.5] {
                assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
            }
            if x == [0.5, 0.5] {
                assert_eq!(v, 1.0);
            }
        }
        // each partial of the Q1 interpolant is bounded by ε^{-α}
        let gmax = rho.gradient().values().iter().map(|g| g[0].abs().max(g[1].abs())).fold(0.0, f64::max);
        assert!(gmax <= 1.0 / eps * (1.0 + 1e-12));
    }

    #[test]
    fn identity_first_order_is_plain() {
        let grid = build_domain_grid(CellMask::full(2, 4), 4).unwrap();
        let big = ScalarField::from_fn(grid.mesh().clone(), |x| x[0] * (1.0 - x[0]) * x[1]);
        let cg = build_cell_grid(2, 4).unwrap();
        let set = CorrectorSet::zeros(&cg);
        let (f, g) = first_order_approx(&grid, &big, &set, 1.0).unwrap();
        assert_eq!(f.values(), big.values());
        assert_eq!(g.values(), big.gradient().values());
    }

    #[test]
    fn approximation_keeps_boundary_values() {
        let s = spec("laminate(1,4)", Source::Constant, Gamma0::Full, vec![4], 8);
        let grid = s.domain(4).unwrap();
        let cg = build_cell_grid(2, 8).unwrap();
        let set = solve_correctors(&s.coefficient, &cg, &s.solver).unwrap();
        let t = homogenized_tensor(&s.coefficient, &set);
        let hom = solve_homogenized(&s, &grid, &t).unwrap();
        let (f, _) = first_order_approx(&grid, &hom.field, &set, 1.0).unwrap();
        for n in 0..grid.num_nodes() {
            if grid.mesh().is_boundary_node(n) {
                assert_eq!(f.values()[n], hom.field.values()[n]);
            }
        }
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let eps = [0.25, 0.125, 0.0625];
        let err: Vec<f64> = eps.iter().map(|e: &f64| 3.0 * e.powf(0.7)).collect();
        assert_abs_diff_eq!(fit_slope(&eps, &err).unwrap(), 0.7, epsilon = 1e-12);
        assert!(fit_slope(&eps, &[1.0, 0.0, 1.0]).is_none());
    }

    #[test]
    fn identity_study_is_degenerate() {
        let s = spec("identity", Source::Constant, Gamma0::Full, vec![2, 4, 8], 4);
        let r = error_study(&s).unwrap();
        assert!(r.flags.degenerate);
        assert!(r.fits.h1_corr.is_none());
        assert!(r.rows.iter().all(|row| row.slope_h1.is_none()));
        assert!(r.rows.iter().all(|row| row.h1_corr_err < 0.05));
    }

    #[test]
    fn study_scales_linearly_with_source() {
        let s1 = spec("laminate(1,4)", Source::Constant, Gamma0::Full, vec![2, 4], 8);
        let mut s3 = s1.clone();
        s3.source_scale = 3.0;
        let r1 = error_study(&s1).unwrap();
        let r3 = error_study(&s3).unwrap();
        for (a, b) in r1.rows.iter().zip(&r3.rows) {
            assert!((3.0 * a.l2_err - b.l2_err).abs() <= 1e-8 * b.l2_err);
            assert!((3.0 * a.h1_corr_err - b.h1_corr_err).abs() <= 1e-8 * b.h1_corr_err);
            assert!(a.h1_corr_err < a.h1_plain_err);
        }
    }

    #[test]
    fn neumann_solutions_have_zero_mean() {
        let s = spec("laminate(1,4)", Source::Sin2PiX1, Gamma0::Empty, vec![4], 8);
        let grid = s.domain(4).unwrap();
        let osc = solve_oscillatory(&s, &grid, grid.eps()).unwrap();
        assert!(osc.field.integral().abs() < 1e-12);
        assert!(l2_norm(&osc.field) > 1e-3);
    }

    #[test]
    fn spec_validation() {
        let mut s = spec("laminate(1,4)", Source::Constant, Gamma0::Full, vec![3], 8);
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        s.cells = vec![4];
        s.cell_divisions = 3;
        assert!(s.validate().is_err());
        s.cell_divisions = 8;
        assert!(s.validate().is_ok());
    }
}
