//! Periodicity defects of cell fields and two periodizations: inductive cutoff
//! lifting and orthogonal projection onto periodic fields.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{CellGrid, Mesh, ScalarField};
use crate::norms::h1_norm;
use crate::sparse::{assemble_stiffness, cg_solve, BoundaryCondition, LinearOperator, SolverConfig, SparseOperator, StiffnessSystem};

/// Even cutoff `θ`: 1 on `|t| ≤ 1/8`, 0 on `|t| ≥ 3/8`, quintic smoothstep between.
#[derive(Debug, Clone, Copy, Default)]
pub struct CutoffProfile;

impl CutoffProfile {
    pub const INNER: f64 = 0.125;
    pub const OUTER: f64 = 0.375;

    pub fn value(&self, t: f64) -> f64 {
        let a = t.abs();
        if a <= Self::INNER {
            1.0
        } else if a >= Self::OUTER {
            0.0
        } else {
            let u = (Self::OUTER - a) / (Self::OUTER - Self::INNER);
            u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
        }
    }

    /// `θ` at the nodes `j/m`, `j = 0..=m`.
    pub fn sample(&self, m: usize) -> Vec<f64> {
        (0..=m).map(|j| self.value(j as f64 / m as f64)).collect()
    }
}

fn check_cell_mesh(phi: &ScalarField) -> Result<()> {
    let mesh = phi.mesh();
    let l = mesh.divisions();
    if mesh.num_elements() != l.pow(mesh.dim() as u32) {
        return Err(Error::InvalidGrid("periodization needs a full cell grid".into()));
    }
    Ok(())
}

/// Node index on a full cell grid.
fn cell_node(mesh: &Mesh, lattice: [usize; 2]) -> usize {
    lattice[0] + (mesh.divisions() + 1) * lattice[1]
}

/// Values on the face `y_j = 1` minus values on `y_j = 0`, ordered along the other axis.
pub fn face_defect(phi: &ScalarField, axis: usize) -> Vec<f64> {
    let mesh = phi.mesh();
    let m = mesh.divisions();
    let v = phi.values();
    if mesh.dim() == 1 {
        return vec![v[m] - v[0]];
    }
    (0..=m)
        .map(|t| {
            let (mut hi, mut lo) = ([0; 2], [0; 2]);
            hi[axis] = m;
            hi[1 - axis] = t;
            lo[1 - axis] = t;
            v[cell_node(mesh, hi)] - v[cell_node(mesh, lo)]
        })
        .collect()
}

/// One induction step: removes the defect across `axis` without disturbing other axes.
pub fn lift_step(phi: &ScalarField, axis: usize, theta: &CutoffProfile) -> ScalarField {
    let mesh = phi.mesh();
    let m = mesh.divisions();
    let d = face_defect(phi, axis);
    let th = theta.sample(m);
    let mut out = phi.clone();
    for (node, val) in out.values_mut().iter_mut().enumerate() {
        let l = mesh.node_lattice(node);
        let bracket = th[l[axis]] - th[m - l[axis]];
        let along = if mesh.dim() == 1 { 0 } else { l[1 - axis] };
        *val += 0.5 * bracket * d[along];
    }
    out
}

/// Periodization by successive cutoff liftings of the face defects, axis by axis.
pub fn periodize_lift(phi: &ScalarField, theta: &CutoffProfile) -> Result<ScalarField> {
    check_cell_mesh(phi)?;
    let mut out = phi.clone();
    for axis in 0..phi.mesh().dim() {
        out = lift_step(&out, axis, theta);
    }
    Ok(out)
}

/// `∫|∇φ|² + (∫φ)²`, the square of the projection's norm.
pub fn projection_norm(phi: &ScalarField) -> f64 {
    let g = phi.gradient().l2_norm();
    (g * g + phi.integral().powi(2)).sqrt()
}

/// `K + w wᵀ` on the periodic unknowns.
#[derive(Debug, Clone)]
struct RankOneUpdate {
    base: SparseOperator,
    weight: f64,
}

impl LinearOperator for RankOneUpdate {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.base.apply(x, y);
        let s = self.weight * x.iter().sum::<f64>();
        y.iter_mut().for_each(|v| *v += self.weight * s);
    }

    fn diagonal(&self) -> Vec<f64> {
        self.base
            .diagonal()
            .into_iter()
            .map(|d| d + self.weight * self.weight)
            .collect()
    }
}

/// Orthogonal projection onto periodic fields for `⟨φ,ψ⟩ = ∫∇φ·∇ψ + (∫φ)(∫ψ)`.
///
/// Built once per cell grid; all projections share the operator.
#[derive(Debug, Clone)]
pub struct PeriodicProjector {
    mesh: Arc<Mesh>,
    full: SparseOperator,
    periodic: StiffnessSystem,
    system: RankOneUpdate,
    cfg: SolverConfig,
}

impl PeriodicProjector {
    pub fn new(grid: &CellGrid, cfg: &SolverConfig) -> Self {
        let mesh = grid.mesh().clone();
        let id = |_, _| [[1.0, 0.0], [0.0, 1.0]];
        let full = assemble_stiffness(&mesh, id, BoundaryCondition::Neumann).operator;
        let periodic = assemble_stiffness(&mesh, id, BoundaryCondition::Periodic);
        // every periodic hat integrates to h^n
        let weight = mesh.element_volume();
        let system = RankOneUpdate {
            base: periodic.operator.clone(),
            weight,
        };
        PeriodicProjector {
            mesh,
            full,
            periodic,
            system,
            cfg: cfg.with_deflation(false),
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    fn rhs(&self, values: &[f64], integral: f64) -> Vec<f64> {
        let mut b = self.periodic.dofs.fold(&self.full.mul(values));
        let w = self.system.weight;
        b.iter_mut().for_each(|v| *v += w * integral);
        b
    }

    /// Projects nodal values; returns nodal values of the periodic projection.
    pub fn project_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        let field = ScalarField::new(self.mesh.clone(), values.to_vec())?;
        let b = self.rhs(values, field.integral());
        let (x, _) = cg_solve(&self.system, &b, &self.cfg)?;
        Ok(self.periodic.dofs.expand(&x))
    }

    pub fn project(&self, phi: &ScalarField) -> Result<ScalarField> {
        ScalarField::new(self.mesh.clone(), self.project_values(phi.values())?)
    }

    /// Projects many columns concurrently.
    pub fn project_columns(&self, columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        columns.par_iter().map(|c| self.project_values(c)).collect()
    }

    /// Relative residual of `∫∇(φ − φ̂)·∇ψ = 0` over all periodic hats `ψ`.
    pub fn orthogonality_residual(&self, phi: &ScalarField, projected: &ScalarField) -> f64 {
        let kphi = self.periodic.dofs.fold(&self.full.mul(phi.values()));
        let khat = self.periodic.operator.mul(&self.periodic.dofs.restrict(projected.values()));
        let r: f64 = kphi.iter().zip(&khat).map(|(a, b)| (a - b).powi(2)).sum();
        let scale: f64 = kphi.iter().map(|a| a * a).sum::<f64>().max(khat.iter().map(|a| a * a).sum());
        if scale == 0.0 {
            r.sqrt()
        } else {
            (r / scale).sqrt()
        }
    }
}

pub fn periodize_project(phi: &ScalarField, cfg: &SolverConfig) -> Result<ScalarField> {
    check_cell_mesh(phi)?;
    let m = phi.mesh().divisions();
    let grid = crate::mesh::build_cell_grid(phi.mesh().dim(), m)?;
    PeriodicProjector::new(&grid, cfg).project(&ScalarField::new(grid.mesh().clone(), phi.values().to_vec())?)
}

/// Per-axis face defects and the H¹ distances of both periodizations.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectReport {
    pub face_defects: Vec<f64>,
    pub lift_distance: f64,
    pub projection_distance: f64,
}

pub fn defect_report(phi: &ScalarField, cfg: &SolverConfig) -> Result<DefectReport> {
    check_cell_mesh(phi)?;
    let face_defects = (0..phi.mesh().dim())
        .map(|j| crate::norms::face_h_half_norm(&face_defect(phi, j)))
        .collect();
    let lifted = periodize_lift(phi, &CutoffProfile)?;
    let projected = periodize_project(phi, cfg)?;
    let projected = ScalarField::new(phi.mesh().clone(), projected.into_values())?;
    Ok(DefectReport {
        face_defects,
        lift_distance: h1_norm(&phi.sub(&lifted)),
        projection_distance: h1_norm(&phi.sub(&projected)),
    })
}
