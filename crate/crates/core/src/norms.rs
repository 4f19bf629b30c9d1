//! Discrete norms: L², H¹ seminorm, H⁻¹ through a Dirichlet Riesz map, spectral face H^{1/2}
//! and the mixed L²(Y; H⁻¹(Ω)) norm.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::Result;
use crate::mesh::{Mesh, ScalarField};
use crate::sparse::{assemble_load, assemble_stiffness, cg_solve, BoundaryCondition, SolverConfig, StiffnessSystem};

pub fn l2_norm(phi: &ScalarField) -> f64 {
    let sq: Vec<f64> = phi.at_quadrature().iter().map(|v| v * v).collect();
    phi.mesh().integrate(&sq).sqrt()
}

pub fn h1_seminorm(phi: &ScalarField) -> f64 {
    phi.gradient().l2_norm()
}

/// `(‖φ‖² + |φ|²_{H¹})^{1/2}`
pub fn h1_norm(phi: &ScalarField) -> f64 {
    l2_norm(phi).hypot(h1_seminorm(phi))
}

/// L² norm of values given at quadrature points (`e * nq + q` layout).
pub fn l2_norm_quad(mesh: &Mesh, values: &[f64]) -> f64 {
    let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    mesh.integrate(&sq).sqrt()
}

/// Riesz map of `H¹₀(Ω)` with the gradient inner product, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct PoissonRiesz {
    mesh: Arc<Mesh>,
    system: StiffnessSystem,
    cfg: SolverConfig,
}

impl PoissonRiesz {
    pub fn new(mesh: Arc<Mesh>, cfg: &SolverConfig) -> Self {
        let system = assemble_stiffness(&mesh, |_, _| [[1.0, 0.0], [0.0, 1.0]], BoundaryCondition::Dirichlet);
        PoissonRiesz {
            mesh,
            system,
            cfg: cfg.with_deflation(false),
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Dual norm of the functional with nodal load `b_a = ⟨g, N_a⟩`; returns `(‖g‖_{H⁻¹}, z)`.
    pub fn solve_load(&self, nodal_load: &[f64]) -> Result<(f64, ScalarField)> {
        let b = self.system.dofs.fold(nodal_load);
        let (z, _) = cg_solve(&self.system.operator, &b, &self.cfg)?;
        let energy: f64 = b.iter().zip(&z).map(|(b, z)| b * z).sum();
        let field = ScalarField::new(self.mesh.clone(), self.system.dofs.expand(&z))?;
        Ok((energy.max(0.0).sqrt(), field))
    }

    pub fn norm_of_load(&self, nodal_load: &[f64]) -> Result<f64> {
        self.solve_load(nodal_load).map(|(n, _)| n)
    }

    /// `‖g‖_{H⁻¹}` for `g` given at quadrature points.
    pub fn norm_quad(&self, values: &[f64]) -> Result<f64> {
        let nq = self.mesh.quadrature().len();
        let load = assemble_load(&self.mesh, |e, q, _| (values[e * nq + q], [0.0, 0.0]));
        self.norm_of_load(&load)
    }

    pub fn norm(&self, g: &ScalarField) -> Result<f64> {
        self.norm_quad(&g.at_quadrature())
    }
}

/// `‖g‖_{H⁻¹(Ω)}`: `‖∇z‖` for the discrete `−Δz = g`, `z ∈ H¹₀(Ω)`.
pub fn h_minus1_norm(g: &ScalarField, cfg: &SolverConfig) -> Result<f64> {
    PoissonRiesz::new(g.mesh().clone(), cfg).norm(g)
}

/// Trapezoid weights of a uniform face grid with `v.len()` nodes on `[0,1]`.
fn trapezoid_weights(len: usize) -> Vec<f64> {
    let m = len - 1;
    let h = 1.0 / m as f64;
    (0..len)
        .map(|j| if j == 0 || j == m { 0.5 * h } else { h })
        .collect()
}

/// Coefficients and squared basis norms of `v` in the cosine eigenbasis of the
/// discrete Neumann Laplacian, with eigenvalues.
fn cosine_spectrum(v: &[f64]) -> Vec<(f64, f64, f64)> {
    let m = v.len() - 1;
    let h = 1.0 / m as f64;
    let w = trapezoid_weights(v.len());
    (0..=m)
        .map(|k| {
            let basis = |j: usize| (std::f64::consts::PI * (k * j) as f64 / m as f64).cos();
            let norm2: f64 = (0..=m).map(|j| w[j] * basis(j).powi(2)).sum();
            let proj: f64 = (0..=m).map(|j| w[j] * v[j] * basis(j)).sum();
            let lambda = 4.0 / (h * h) * (std::f64::consts::PI * k as f64 / (2 * m) as f64).sin().powi(2);
            (proj / norm2, norm2, lambda)
        })
        .collect()
}

/// Spectral `H^{1/2}` norm of nodal face values: `Σ_k (1+λ_k)^{1/2} |v̂_k|²` in the
/// Neumann cosine basis. A single value (1D cell face) gives `|v|`.
pub fn face_h_half_norm(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0].abs(),
        _ => cosine_spectrum(v)
            .into_iter()
            .map(|(c, n2, l)| (1.0 + l).sqrt() * c * c * n2)
            .sum::<f64>()
            .sqrt(),
    }
}

/// Trapezoid `L²` norm of face values; `|v|` for a single value.
pub fn face_l2_norm(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0].abs(),
        n => trapezoid_weights(n)
            .iter()
            .zip(v)
            .map(|(w, x)| w * x * x)
            .sum::<f64>()
            .sqrt(),
    }
}

/// Quadrature of the `y` variable: points in `Y` and weights summing to one.
#[derive(Debug, Clone)]
pub struct YQuadrature {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl YQuadrature {
    /// Gauss points of every element of the `m_y` cell grid.
    pub fn gauss(cell_mesh: &Mesh) -> Self {
        let nq = cell_mesh.quadrature().len();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for e in 0..cell_mesh.num_elements() {
            for q in 0..nq {
                points.push(cell_mesh.quad_point(e, q));
                weights.push(cell_mesh.quad_weight(q));
            }
        }
        YQuadrature { points, weights }
    }
}

/// `(∫_Y Σ_k ‖G_k(·,y)‖²_{H⁻¹(Ω)} dy)^{1/2}`.
///
/// `g(i, e, q)` is the vector value at y-point `i` and x-quadrature point `q` of fine element `e`.
/// The per-point Poisson solves run concurrently; the reduction is serial.
pub fn mixed_l2y_hminus1x_norm(
    riesz: &PoissonRiesz,
    yq: &YQuadrature,
    dim: usize,
    g: impl Fn(usize, usize, usize) -> [f64; 2] + Sync,
) -> Result<f64> {
    let mesh = riesz.mesh().clone();
    let per_point: Vec<f64> = (0..yq.points.len())
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for k in 0..dim {
                let load = assemble_load(&mesh, |e, q, _| (g(i, e, q)[k], [0.0, 0.0]));
                s += riesz.norm_of_load(&load)?.powi(2);
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(per_point
        .iter()
        .zip(&yq.weights)
        .map(|(s, w)| s * w)
        .sum::<f64>()
        .sqrt())
}
