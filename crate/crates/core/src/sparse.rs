//! Q1 assembly and a Jacobi-preconditioned conjugate-gradient solver.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{Mat2, Mesh, Point};

const NONE: usize = usize::MAX;
const PAR_ROWS: usize = 4096;

/// Anything CG can iterate with: a symmetric positive (semi)definite operator.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    /// `y = A x`
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
}

/// Compressed-row sparse matrix.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseOperator {
    /// Builds a square matrix, summing duplicate entries.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>, symmetric: bool) -> Self {
        triplets.par_sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len() / 2);
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len() / 2);
        let mut last = (NONE, NONE);
        for (i, j, v) in triplets {
            if (i, j) == last {
                *values.last_mut().expect("entry exists") += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = (i, j);
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseOperator {
            n,
            row_ptr,
            col_idx,
            values,
            symmetric,
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseOperator::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect(), true)
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.apply(x, &mut y);
        y
    }

    #[inline]
    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            s += self.values[k] * x[self.col_idx[k]];
        }
        s
    }
}

impl LinearOperator for SparseOperator {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        if self.n >= PAR_ROWS {
            y.par_iter_mut()
                .with_min_len(1024)
                .enumerate()
                .for_each(|(i, yi)| *yi = self.row_dot(i, x));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = self.row_dot(i, x);
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative residual `‖b − Ax‖ / ‖b‖` at which CG stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Work in the complement of the constants (singular periodic and Neumann systems).
    pub deflate: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-10,
            max_iterations: 50_000,
            deflate: false,
        }
    }
}

impl SolverConfig {
    pub fn with_deflation(self, deflate: bool) -> Self {
        SolverConfig { deflate, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::config("solver.tolerance", "must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("solver.max_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `A x = b` by preconditioned conjugate gradients.
///
/// With deflation the right-hand side is projected onto the complement of the
/// constants and the returned solution has zero mean.
pub fn cg_solve(
    op: &impl LinearOperator,
    rhs: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    cg_solve_observed(op, rhs, cfg, |_, _| {})
}

/// [`cg_solve`] calling `observe(iteration, x)` after every update.
pub fn cg_solve_observed(
    op: &impl LinearOperator,
    rhs: &[f64],
    cfg: &SolverConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<(Vec<f64>, SolveStats)> {
    let n = op.dim();
    assert_eq!(rhs.len(), n, "right-hand side length");
    let mut b = rhs.to_vec();
    if cfg.deflate {
        remove_mean(&mut b);
    }
    let b_norm = dot(&b, &b).sqrt();
    let raw_norm = dot(rhs, rhs).sqrt();
    if b_norm == 0.0 || b_norm <= 1e-14 * raw_norm {
        return Ok((vec![0.0; n], SolveStats::default()));
    }

    let inv_diag: Vec<f64> = op
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precondition = |r: &[f64], z: &mut Vec<f64>| {
        for i in 0..n {
            z[i] = inv_diag[i] * r[i];
        }
        if cfg.deflate {
            remove_mean(z);
        }
    };

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let mut rel = 1.0;

    while iterations < cfg.max_iterations {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        observe(iterations, &x);
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= cfg.tolerance {
            break;
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    if cfg.deflate {
        remove_mean(&mut x);
    }
    // report the true residual, not the recurrence
    op.apply(&x, &mut ap);
    let mut res = 0.0;
    for i in 0..n {
        res += (b[i] - ap[i]).powi(2);
    }
    let true_rel = res.sqrt() / b_norm;
    let stats = SolveStats {
        iterations,
        relative_residual: true_rel,
    };
    if rel > cfg.tolerance || true_rel > 10.0 * cfg.tolerance {
        return Err(Error::NotConverged {
            iterations,
            residual: true_rel,
        });
    }
    Ok((x, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryCondition {
    /// Homogeneous Dirichlet on every boundary node.
    Dirichlet,
    /// Opposite faces of the unit cell identified.
    Periodic,
    /// Natural condition; constants span the kernel.
    Neumann,
}

/// Map between mesh nodes and solver unknowns.
#[derive(Debug, Clone)]
pub struct DofMap {
    node_to_dof: Vec<usize>,
    num_dofs: usize,
    bc: BoundaryCondition,
}

impl DofMap {
    pub fn new(mesh: &Mesh, bc: BoundaryCondition) -> Self {
        let n = mesh.num_nodes();
        let mut node_to_dof = vec![NONE; n];
        let num_dofs = match bc {
            BoundaryCondition::Neumann => {
                for (i, d) in node_to_dof.iter_mut().enumerate() {
                    *d = i;
                }
                n
            }
            BoundaryCondition::Dirichlet => {
                let mut k = 0;
                for (i, d) in node_to_dof.iter_mut().enumerate() {
                    if !mesh.is_boundary_node(i) {
                        *d = k;
                        k += 1;
                    }
                }
                k
            }
            BoundaryCondition::Periodic => {
                let l = mesh.divisions();
                for (i, d) in node_to_dof.iter_mut().enumerate() {
                    let [a, b] = mesh.node_lattice(i);
                    *d = if mesh.dim() == 2 {
                        a % l + l * (b % l)
                    } else {
                        a % l
                    };
                }
                l.pow(mesh.dim() as u32)
            }
        };
        DofMap {
            node_to_dof,
            num_dofs,
            bc,
        }
    }

    pub fn num_dofs(&self) -> usize {
        self.num_dofs
    }

    pub fn boundary_condition(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn dof(&self, node: usize) -> Option<usize> {
        match self.node_to_dof[node] {
            NONE => None,
            d => Some(d),
        }
    }

    /// Sums nodal contributions into unknowns; eliminated nodes are dropped.
    pub fn fold(&self, nodal: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_dofs];
        for (node, v) in nodal.iter().enumerate() {
            if let Some(d) = self.dof(node) {
                out[d] += v;
            }
        }
        out
    }

    /// Nodal values from unknowns; eliminated nodes get zero.
    pub fn expand(&self, dofs: &[f64]) -> Vec<f64> {
        self.node_to_dof
            .iter()
            .map(|&d| if d == NONE { 0.0 } else { dofs[d] })
            .collect()
    }

    /// Unknown values read from a nodal vector (periodic duplicates must agree).
    pub fn restrict(&self, nodal: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_dofs];
        for (node, v) in nodal.iter().enumerate() {
            if let Some(d) = self.dof(node) {
                out[d] = *v;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StiffnessSystem {
    pub operator: SparseOperator,
    pub dofs: DofMap,
}

/// Element stiffness `∫ A∇N_b·∇N_a` with `A` evaluated per quadrature point.
pub fn element_stiffness(mesh: &Mesh, e: usize, coeff: &impl Fn(usize, Point) -> Mat2) -> [[f64; 4]; 4] {
    let npe = mesh.nodes_per_element();
    let mut k = [[0.0; 4]; 4];
    for q in 0..mesh.quadrature().len() {
        let w = mesh.quad_weight(q);
        let a = coeff(e, mesh.quad_point(e, q));
        let g = mesh.grad_at(q);
        for i in 0..npe {
            let ag = [
                a[0][0] * g[i][0] + a[0][1] * g[i][1],
                a[1][0] * g[i][0] + a[1][1] * g[i][1],
            ];
            for j in 0..npe {
                k[j][i] += w * (ag[0] * g[j][0] + ag[1] * g[j][1]);
            }
        }
    }
    k
}

/// Assembles `∫ A∇u·∇v` on the unknowns selected by `bc`.
///
/// `coeff(element, x)` is evaluated at every quadrature point.
pub fn assemble_stiffness(
    mesh: &Mesh,
    coeff: impl Fn(usize, Point) -> Mat2 + Sync,
    bc: BoundaryCondition,
) -> StiffnessSystem {
    let dofs = DofMap::new(mesh, bc);
    let npe = mesh.nodes_per_element();
    let triplets: Vec<(usize, usize, f64)> = (0..mesh.num_elements())
        .into_par_iter()
        .flat_map_iter(|e| {
            let k = element_stiffness(mesh, e, &coeff);
            let nodes = mesh.elements()[e].nodes;
            let mut out = Vec::with_capacity(npe * npe);
            for a in 0..npe {
                let Some(da) = dofs.dof(nodes[a]) else { continue };
                for b in 0..npe {
                    let Some(db) = dofs.dof(nodes[b]) else { continue };
                    out.push((da, db, k[a][b]));
                }
            }
            out
        })
        .collect();
    let operator = SparseOperator::from_triplets(dofs.num_dofs(), triplets, true);
    StiffnessSystem { operator, dofs }
}

/// Nodal load `b_a = ∫ s N_a + F·∇N_a` where `integrand(e, q, x) = (s, F)`.
pub fn assemble_load(mesh: &Mesh, integrand: impl Fn(usize, usize, Point) -> (f64, Point)) -> Vec<f64> {
    let npe = mesh.nodes_per_element();
    let mut b = vec![0.0; mesh.num_nodes()];
    for (e, el) in mesh.elements().iter().enumerate() {
        for q in 0..mesh.quadrature().len() {
            let w = mesh.quad_weight(q);
            let (s, f) = integrand(e, q, mesh.quad_point(e, q));
            let n = mesh.shape_at(q);
            let g = mesh.grad_at(q);
            for a in 0..npe {
                b[el.nodes[a]] += w * (s * n[a] + f[0] * g[a][0] + f[1] * g[a][1]);
            }
        }
    }
    b
}
