//! Corrector cell problems and the homogenized tensor.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{CellGrid, Mat2, MatrixField, ScalarField};
use crate::sparse::{assemble_load, assemble_stiffness, cg_solve, BoundaryCondition, SolverConfig, StiffnessSystem};

/// Periodic zero-mean correctors `χ_i`, one per direction.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    grid: CellGrid,
    correctors: Vec<ScalarField>,
    residuals: Vec<f64>,
    iterations: Vec<usize>,
}

impl CorrectorSet {
    pub fn grid(&self) -> &CellGrid {
        &self.grid
    }

    pub fn corrector(&self, i: usize) -> &ScalarField {
        &self.correctors[i]
    }

    pub fn correctors(&self) -> &[ScalarField] {
        &self.correctors
    }

    /// Final relative solver residual per direction.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn iterations(&self) -> &[usize] {
        &self.iterations
    }

    /// Zero correctors, valid for any constant coefficient.
    pub fn zeros(grid: &CellGrid) -> Self {
        let d = grid.dim();
        CorrectorSet {
            grid: grid.clone(),
            correctors: (0..d).map(|_| ScalarField::zeros(grid.mesh().clone())).collect(),
            residuals: vec![0.0; d],
            iterations: vec![0; d],
        }
    }

    /// `∇_y χ_i` at reference point `local` of cell-grid element `e`.
    pub fn gradient(&self, i: usize, e: usize, local: [f64; 2]) -> [f64; 2] {
        self.correctors[i].gradient_at(e, local)
    }

    /// Relative residual of the discrete cell equation for direction `i`, against all periodic hats.
    pub fn flux_residual(&self, a: &MatrixField, i: usize) -> f64 {
        let mesh = self.grid.mesh();
        let sys = assemble_stiffness(mesh, |_, y| a.sample(y), BoundaryCondition::Periodic);
        let b = sys.dofs.fold(&corrector_load(a, &self.grid, i));
        let chi = sys.dofs.restrict(self.correctors[i].values());
        let k = sys.operator.mul(&chi);
        let r: f64 = k.iter().zip(&b).map(|(k, b)| (k - b).powi(2)).sum();
        let bn: f64 = b.iter().map(|v| v * v).sum();
        if bn == 0.0 {
            r.sqrt()
        } else {
            (r / bn).sqrt()
        }
    }
}

/// Constant effective matrix of the homogenized problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomogenizedTensor {
    dim: usize,
    matrix: Mat2,
}

impl HomogenizedTensor {
    pub fn new(dim: usize, matrix: Mat2) -> Self {
        HomogenizedTensor { dim, matrix }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = [[0.0; 2]; 2];
        for (k, row) in m.iter_mut().enumerate().take(dim) {
            row[k] = 1.0;
        }
        HomogenizedTensor { dim, matrix: m }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> Mat2 {
        self.matrix
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.matrix[r][c]
    }

    /// Largest entrywise deviation from `other`.
    pub fn max_abs_diff(&self, other: &Mat2) -> f64 {
        let mut d = 0.0f64;
        for r in 0..self.dim {
            for c in 0..self.dim {
                d = d.max((self.matrix[r][c] - other[r][c]).abs());
            }
        }
        d
    }

    /// Eigenvalues in ascending order (symmetric part).
    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = self.matrix;
        if self.dim == 1 {
            return vec![m[0][0]];
        }
        let off = 0.5 * (m[0][1] + m[1][0]);
        let mean = 0.5 * (m[0][0] + m[1][1]);
        let rad = (0.25 * (m[0][0] - m[1][1]).powi(2) + off * off).sqrt();
        vec![mean - rad, mean + rad]
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.matrix[0][0].abs().max(self.matrix[1][1].abs()).max(1e-300);
        (self.matrix[0][1] - self.matrix[1][0]).abs() <= rel_tol * scale
    }

    /// `𝒜 ξ · ξ`
    pub fn quadratic_form(&self, xi: [f64; 2]) -> f64 {
        let m = self.matrix;
        xi[0] * (m[0][0] * xi[0] + m[0][1] * xi[1]) + xi[1] * (m[1][0] * xi[0] + m[1][1] * xi[1])
    }

    /// Entrywise product with a scalar.
    pub fn scaled(&self, t: f64) -> Self {
        let mut m = self.matrix;
        m.iter_mut().flatten().for_each(|v| *v *= t);
        HomogenizedTensor { dim: self.dim, matrix: m }
    }
}

/// Nodal load `−∫ A e_i · ∇ψ_a` of the cell problem in direction `i`.
fn corrector_load(a: &MatrixField, grid: &CellGrid, i: usize) -> Vec<f64> {
    assemble_load(grid.mesh(), |_, _, y| {
        let m = a.sample(y);
        (0.0, [-m[0][i], -m[1][i]])
    })
}

fn check_resolution(a: &MatrixField, grid: &CellGrid) -> Result<()> {
    if !grid.divisions().is_multiple_of(a.alignment()) {
        return Err(Error::ResolutionMismatch(format!(
            "coefficient `{a}` needs cell divisions divisible by {}, got {}",
            a.alignment(),
            grid.divisions()
        )));
    }
    Ok(())
}

fn solve_with(
    sys: &StiffnessSystem,
    a: &MatrixField,
    i: usize,
    grid: &CellGrid,
    cfg: &SolverConfig,
) -> Result<(ScalarField, f64, usize)> {
    let b = sys.dofs.fold(&corrector_load(a, grid, i));
    let (x, stats) = cg_solve(&sys.operator, &b, &cfg.with_deflation(true))?;
    let field = ScalarField::new(grid.mesh().clone(), sys.dofs.expand(&x))?;
    Ok((field, stats.relative_residual, stats.iterations))
}

/// Solves `∫ A∇(χ_i + y_i)·∇ψ = 0` for all periodic `ψ`, with `∫χ_i = 0`.
pub fn solve_corrector(a: &MatrixField, i: usize, grid: &CellGrid, cfg: &SolverConfig) -> Result<ScalarField> {
    check_resolution(a, grid)?;
    if i >= grid.dim() {
        return Err(Error::InvalidGrid(format!("direction {i} in dimension {}", grid.dim())));
    }
    let sys = assemble_stiffness(grid.mesh(), |_, y| a.sample(y), BoundaryCondition::Periodic);
    solve_with(&sys, a, i, grid, cfg).map(|(f, _, _)| f)
}

/// All correctors for `a`, directions solved concurrently on a shared operator.
pub fn solve_correctors(a: &MatrixField, grid: &CellGrid, cfg: &SolverConfig) -> Result<CorrectorSet> {
    check_resolution(a, grid)?;
    let sys = assemble_stiffness(grid.mesh(), |_, y| a.sample(y), BoundaryCondition::Periodic);
    let solved: Vec<(ScalarField, f64, usize)> = (0..grid.dim())
        .into_par_iter()
        .map(|i| solve_with(&sys, a, i, grid, cfg))
        .collect::<Result<_>>()?;
    let mut set = CorrectorSet {
        grid: grid.clone(),
        correctors: Vec::new(),
        residuals: Vec::new(),
        iterations: Vec::new(),
    };
    for (f, r, it) in solved {
        set.correctors.push(f);
        set.residuals.push(r);
        set.iterations.push(it);
    }
    Ok(set)
}

/// `𝒜 e_i = ∫_Y A (e_i + ∇χ_i)`, by Gauss quadrature on the cell grid.
pub fn homogenized_tensor(a: &MatrixField, correctors: &CorrectorSet) -> HomogenizedTensor {
    let grid = correctors.grid();
    let mesh = grid.mesh();
    let dim = grid.dim();
    let mut m = [[0.0; 2]; 2];
    for (i, chi) in correctors.correctors().iter().enumerate() {
        let grads = chi.gradient();
        let nq = mesh.quadrature().len();
        for e in 0..mesh.num_elements() {
            for q in 0..nq {
                let y = mesh.quad_point(e, q);
                let w = mesh.quad_weight(q);
                let am = a.sample(y);
                let mut v = grads.values()[e * nq + q];
                v[i] += 1.0;
                for r in 0..dim {
                    m[r][i] += w * (am[r][0] * v[0] + am[r][1] * v[1]);
                }
            }
        }
    }
    HomogenizedTensor { dim, matrix: m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_cell_grid;
    use approx::assert_abs_diff_eq;

    fn h1_norm(f: &ScalarField) -> f64 {
        let mesh = f.mesh();
        let v: Vec<f64> = f.at_quadrature().iter().map(|x| x * x).collect();
        (mesh.integrate(&v) + f.gradient().l2_norm().powi(2)).sqrt()
    }

    #[test]
    fn identity_has_zero_correctors() {
        let g = build_cell_grid(2, 16).unwrap();
        let a = MatrixField::identity();
        let set = solve_correctors(&a, &g, &SolverConfig::default()).unwrap();
        for chi in set.correctors() {
            assert!(h1_norm(chi) <= 1e-10);
        }
        let t = homogenized_tensor(&a, &set);
        assert!(t.max_abs_diff(&[[1.0, 0.0], [0.0, 1.0]]) <= 1e-10);
    }

    #[test]
    fn laminate_corrector_is_piecewise_linear() {
        let g = build_cell_grid(2, 128).unwrap();
        let a: MatrixField = "laminate(1,4)".parse().unwrap();
        let set = solve_correctors(&a, &g, &SolverConfig::default()).unwrap();
        let chi = set.corrector(0);
        let e_soft = g.mesh().element_at([10, 40]).unwrap();
        let e_stiff = g.mesh().element_at([100, 7]).unwrap();
        // 1D flux continuity: a (1 + χ') = 1.6 on both phases
        assert_abs_diff_eq!(chi.gradient_at(e_soft, [0.5, 0.5])[0], 0.6, epsilon = 1e-8);
        assert_abs_diff_eq!(chi.gradient_at(e_stiff, [0.5, 0.5])[0], -0.6, epsilon = 1e-8);
        assert!(h1_norm(set.corrector(1)) <= 1e-9);
        let mean = chi.integral();
        assert!(mean.abs() <= 1e-12);
        let t = homogenized_tensor(&a, &set);
        assert!(t.max_abs_diff(&[[1.6, 0.0], [0.0, 2.5]]) <= 2e-3);
    }

    #[test]
    fn flux_residual_and_symmetry() {
        let g = build_cell_grid(2, 16).unwrap();
        let a: MatrixField = "checkerboard(1,10)".parse().unwrap();
        let cfg = SolverConfig::default();
        let set = solve_correctors(&a, &g, &cfg).unwrap();
        for i in 0..2 {
            assert!(set.flux_residual(&a, i) <= 10.0 * cfg.tolerance);
        }
        let t = homogenized_tensor(&a, &set);
        assert!(t.is_symmetric(1e-10));
        let (c, big_c) = a.bounds();
        for ev in t.eigenvalues() {
            assert!(ev >= c && ev <= big_c);
        }
    }

    #[test]
    fn scaling_covariance() {
        let g = build_cell_grid(2, 16).unwrap();
        let a = MatrixField::new(crate::mesh::Coefficient::Smooth).unwrap();
        let cfg = SolverConfig::default();
        let t1 = homogenized_tensor(&a, &solve_correctors(&a, &g, &cfg).unwrap());
        let a3 = a.scaled(3.0);
        let t3 = homogenized_tensor(&a3, &solve_correctors(&a3, &g, &cfg).unwrap());
        assert!(t3.max_abs_diff(&t1.scaled(3.0).matrix()) <= 1e-9);
    }

    #[test]
    fn voigt_reuss_bounds() {
        let g = build_cell_grid(2, 32).unwrap();
        let cfg = SolverConfig::default();
        for spec in ["laminate(1,4)", "checkerboard(1,100)", "smooth"] {
            let a: MatrixField = spec.parse().unwrap();
            let t = homogenized_tensor(&a, &solve_correctors(&a, &g, &cfg).unwrap());
            // cell averages of a and 1/a by the same quadrature
            let mesh = g.mesh();
            let (mut arith, mut harm) = (0.0, 0.0);
            for e in 0..mesh.num_elements() {
                for q in 0..mesh.quadrature().len() {
                    let s = a.scalar(mesh.quad_point(e, q));
                    arith += mesh.quad_weight(q) * s;
                    harm += mesh.quad_weight(q) / s;
                }
            }
            let harm = 1.0 / harm;
            for xi in [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]] {
                let v = t.quadratic_form(xi);
                assert!(v >= harm - 1e-9 && v <= arith + 1e-9, "{spec}: {v} not in [{harm}, {arith}]");
            }
        }
    }

    #[test]
    fn misaligned_grid_rejected() {
        let g = build_cell_grid(2, 5).unwrap();
        let a: MatrixField = "laminate(1,4)".parse().unwrap();
        assert!(matches!(
            solve_correctors(&a, &g, &SolverConfig::default()),
            Err(Error::ResolutionMismatch(_))
        ));
    }
}
