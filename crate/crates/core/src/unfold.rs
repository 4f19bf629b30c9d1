//! Unfolding `T_ε`, mean in the cells `M_Y^ε`, scale splitting `Q_ε`, averaging `U_ε`
//! and the constructive two-scale decomposition.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{build_cell_grid, CellGrid, DomainGrid, Point, ScalarField};
use crate::norms::{l2_norm, l2_norm_quad, mixed_l2y_hminus1x_norm, PoissonRiesz, YQuadrature};
use crate::periodize::PeriodicProjector;
use crate::sparse::SolverConfig;

const NONE: usize = usize::MAX;

fn check_field(grid: &DomainGrid, phi: &ScalarField) -> Result<()> {
    if !phi.mesh().same_layout(grid.mesh()) {
        return Err(Error::ResolutionMismatch("field does not live on the domain grid".into()));
    }
    Ok(())
}

/// A function on `Ω × Y`, constant in `x` on every ε-cell: one nodal y-array per active cell.
#[derive(Debug, Clone)]
pub struct UnfoldedField {
    dim: usize,
    n_cells: usize,
    eps: f64,
    cells: Vec<[usize; 2]>,
    lookup: Vec<usize>,
    y_grid: CellGrid,
    data: Vec<f64>,
}

impl UnfoldedField {
    /// Samples `f(cell, y)` at the y-nodes of every active cell.
    pub fn from_fn(grid: &DomainGrid, y_grid: CellGrid, f: impl Fn([usize; 2], Point) -> f64) -> Result<Self> {
        if y_grid.dim() != grid.dim() {
            return Err(Error::ResolutionMismatch("y-grid dimension differs from domain".into()));
        }
        let cells = grid.active_cells();
        let mut lookup = vec![NONE; grid.cells_per_axis().pow(grid.dim() as u32)];
        for (k, c) in cells.iter().enumerate() {
            lookup[grid.cell_linear(*c)] = k;
        }
        let ymesh = y_grid.mesh().clone();
        let ny = ymesh.num_nodes();
        let mut data = Vec::with_capacity(cells.len() * ny);
        for c in &cells {
            for j in 0..ny {
                data.push(f(*c, ymesh.node_coords(j)));
            }
        }
        Ok(UnfoldedField {
            dim: grid.dim(),
            n_cells: grid.cells_per_axis(),
            eps: grid.eps(),
            cells,
            lookup,
            y_grid,
            data,
        })
    }

    /// The same layout with new column data.
    pub fn with_columns(&self, columns: Vec<Vec<f64>>) -> Result<Self> {
        let ny = self.y_grid.num_nodes();
        if columns.len() != self.cells.len() || columns.iter().any(|c| c.len() != ny) {
            return Err(Error::ResolutionMismatch("column layout differs".into()));
        }
        Ok(UnfoldedField {
            data: columns.into_iter().flatten().collect(),
            ..self.clone()
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn y_grid(&self) -> &CellGrid {
        &self.y_grid
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[[usize; 2]] {
        &self.cells
    }

    /// Position of an active cell in column order.
    pub fn position(&self, cell: [usize; 2]) -> Option<usize> {
        let idx = cell[0] + if self.dim == 2 { self.n_cells * cell[1] } else { 0 };
        self.lookup.get(idx).copied().filter(|&k| k != NONE)
    }

    pub fn column(&self, k: usize) -> &[f64] {
        let ny = self.y_grid.num_nodes();
        &self.data[k * ny..(k + 1) * ny]
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cells.len()).map(|k| self.column(k).to_vec()).collect()
    }

    pub fn column_field(&self, k: usize) -> ScalarField {
        ScalarField::new(self.y_grid.mesh().clone(), self.column(k).to_vec()).expect("column length matches y-grid")
    }

    /// Q1 value of column `k` at `y ∈ Ȳ`.
    pub fn value(&self, k: usize, y: Point) -> f64 {
        self.column_field(k).evaluate(y).expect("y lies in the closed cell")
    }

    /// `∫_{Ω×Y}`, exact per-cell quadrature.
    pub fn integral(&self) -> f64 {
        let vol = self.eps.powi(self.dim as i32);
        (0..self.cells.len()).map(|k| vol * self.column_field(k).integral()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        let vol = self.eps.powi(self.dim as i32);
        (0..self.cells.len())
            .map(|k| vol * l2_norm(&self.column_field(k)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖·‖_{H¹(Y; L²(Ω))}`
    pub fn h1y_norm(&self) -> f64 {
        let vol = self.eps.powi(self.dim as i32);
        (0..self.cells.len())
            .map(|k| {
                let f = self.column_field(k);
                vol * (l2_norm(&f).powi(2) + f.gradient().l2_norm().powi(2))
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// `T_ε(φ)(x, y) = φ(ε[x/ε] + εy)` on a y-grid with `m_y` divisions.
///
/// Values are read directly when `m_y` divides the fine resolution, Q1-interpolated otherwise.
pub fn unfold(grid: &DomainGrid, phi: &ScalarField, m_y: usize) -> Result<UnfoldedField> {
    check_field(grid, phi)?;
    let y_grid = build_cell_grid(grid.dim(), m_y)?;
    let s = grid.sub();
    let eps = grid.eps();
    let mesh = grid.mesh().clone();
    let direct = s.is_multiple_of(m_y);
    let stride = s / m_y.max(1);
    UnfoldedField::from_fn(grid, y_grid, |c, y| {
        if direct {
            // recover the y-node lattice exactly from its coordinates
            let mut l = [0usize; 2];
            for k in 0..grid.dim() {
                let a = (y[k] * m_y as f64).round() as usize;
                l[k] = c[k] * s + a * stride;
            }
            let node = mesh.node_at(l).expect("fine node of an active cell");
            phi.values()[node]
        } else {
            let x = [eps * (c[0] as f64 + y[0]), eps * (c[1] as f64 + y[1])];
            phi.evaluate(x).expect("point of an active cell")
        }
    })
}

/// Per-cell means of a quantity given at fine quadrature points, on the full `N^n` lattice.
///
/// Inactive cells hold `NaN`.
pub fn cell_means_quad(grid: &DomainGrid, values: &[f64]) -> Vec<f64> {
    let mesh = grid.mesh();
    let nq = mesh.quadrature().len();
    let n = grid.cells_per_axis().pow(grid.dim() as u32);
    let mut sums = vec![0.0; n];
    for e in 0..mesh.num_elements() {
        let c = grid.cell_linear(grid.cell_of_element(e));
        for q in 0..nq {
            sums[c] += mesh.quad_weight(q) * values[e * nq + q];
        }
    }
    let vol = grid.eps().powi(grid.dim() as i32);
    let mut out = vec![f64::NAN; n];
    for c in grid.active_cells() {
        let i = grid.cell_linear(c);
        out[i] = sums[i] / vol;
    }
    out
}

/// `M_Y^ε(φ)`: cell means on the full lattice (`NaN` on inactive cells).
pub fn cell_mean(grid: &DomainGrid, phi: &ScalarField) -> Result<Vec<f64>> {
    check_field(grid, phi)?;
    Ok(cell_means_quad(grid, &phi.at_quadrature()))
}

/// Piecewise-constant cell means expanded to fine quadrature points.
pub fn means_at_quadrature(grid: &DomainGrid, means: &[f64]) -> Vec<f64> {
    let mesh = grid.mesh();
    let nq = mesh.quadrature().len();
    let mut out = Vec::with_capacity(mesh.num_elements() * nq);
    for e in 0..mesh.num_elements() {
        let m = means[grid.cell_linear(grid.cell_of_element(e))];
        out.extend(std::iter::repeat_n(m, nq));
    }
    out
}

fn mean_or_reflected(grid: &DomainGrid, means: &[f64], xi: [i64; 2]) -> Option<f64> {
    let at = |c: [i64; 2]| -> Option<f64> {
        grid.cell_active(c)
            .then(|| means[grid.cell_linear([c[0] as usize, c[1] as usize])])
    };
    if let Some(v) = at(xi) {
        return Some(v);
    }
    let dim = grid.dim();
    let average = |cands: Vec<[i64; 2]>| -> Option<f64> {
        let vals: Vec<f64> = cands.into_iter().filter_map(at).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut faces = Vec::new();
    for k in 0..dim {
        for d in [-1, 1] {
            let mut c = xi;
            c[k] += d;
            faces.push(c);
        }
    }
    if let Some(v) = average(faces) {
        return Some(v);
    }
    if dim == 2 {
        let diagonals = [[-1, -1], [1, -1], [-1, 1], [1, 1]]
            .iter()
            .map(|d| [xi[0] + d[0], xi[1] + d[1]])
            .collect();
        return average(diagonals);
    }
    None
}

/// Values at the macro nodes `εξ'` used by `Q_ε`: the mean of the cell with lower corner `εξ'`,
/// with cells outside `Ω` filled by even reflection.
pub fn macro_node_values(grid: &DomainGrid, means: &[f64]) -> Vec<f64> {
    let n = grid.cells_per_axis();
    let ny = if grid.dim() == 2 { n + 1 } else { 1 };
    let mut out = Vec::with_capacity((n + 1) * ny);
    for j in 0..ny {
        for i in 0..=n {
            out.push(mean_or_reflected(grid, means, [i as i64, j as i64]).unwrap_or(0.0));
        }
    }
    out
}

/// `Q_ε` from cell means: Q1 interpolation of the macro node values, sampled at fine nodes.
pub fn q_interp_means(grid: &DomainGrid, means: &[f64]) -> ScalarField {
    let n = grid.cells_per_axis();
    let s = grid.sub();
    let nodes = macro_node_values(grid, means);
    let mesh = grid.mesh().clone();
    let dim = grid.dim();
    let values = (0..mesh.num_nodes())
        .map(|node| {
            let l = mesh.node_lattice(node);
            let mut base = [0usize; 2];
            let mut t = [0.0; 2];
            for k in 0..dim {
                base[k] = (l[k] / s).min(n - 1);
                t[k] = (l[k] - base[k] * s) as f64 / s as f64;
            }
            let mut v = 0.0;
            for a in 0..(1usize << dim) {
                let o = crate::mesh::local_offset(a);
                let mut w = 1.0;
                for k in 0..dim {
                    w *= if o[k] == 1 { t[k] } else { 1.0 - t[k] };
                }
                if w != 0.0 {
                    v += w * nodes[(base[0] + o[0]) + (n + 1) * (base[1] + o[1])];
                }
            }
            v
        })
        .collect();
    ScalarField::new(mesh, values).expect("one value per node")
}

/// `Q_ε(φ)`
pub fn q_interp(grid: &DomainGrid, phi: &ScalarField) -> Result<ScalarField> {
    Ok(q_interp_means(grid, &cell_mean(grid, phi)?))
}

/// `(Φ, φ̲)` with `Φ = Q_ε(φ)` and `φ = Φ + ε φ̲`.
pub fn remainder_split(grid: &DomainGrid, phi: &ScalarField) -> Result<(ScalarField, ScalarField)> {
    let big = q_interp(grid, phi)?;
    let mut under = phi.sub(&big);
    let inv = 1.0 / grid.eps();
    under.values_mut().iter_mut().for_each(|v| *v *= inv);
    Ok((big, under))
}

/// An active cell containing fine node `node`, preferring `[x/ε]`, and the local `y`.
fn node_cell(grid: &DomainGrid, node: usize) -> ([usize; 2], Point) {
    let l = grid.mesh().node_lattice(node);
    let s = grid.sub();
    let dim = grid.dim();
    let mut options = [[0i64; 2]; 2];
    for k in 0..dim {
        let f = (l[k] / s) as i64;
        options[k] = [f, if l[k].is_multiple_of(s) { f - 1 } else { f }];
    }
    for &j in &options[1][..if dim == 2 { 2 } else { 1 }] {
        for &i in &options[0] {
            let c = [i, j];
            if grid.cell_active(c) {
                let mut y = [0.0; 2];
                for k in 0..dim {
                    y[k] = (l[k] as i64 - c[k] * s as i64) as f64 / s as f64;
                }
                return ([c[0] as usize, c[1] as usize], y);
            }
        }
    }
    unreachable!("every mesh node touches an active cell")
}

/// `U_ε(Ψ)(x) = Ψ(ε[x/ε], {x/ε})` at the fine nodes.
pub fn average(grid: &DomainGrid, u: &UnfoldedField) -> Result<ScalarField> {
    let mesh = grid.mesh().clone();
    let columns: Vec<ScalarField> = (0..u.num_cells()).map(|k| u.column_field(k)).collect();
    let mut values = Vec::with_capacity(mesh.num_nodes());
    for node in 0..mesh.num_nodes() {
        let (c, y) = node_cell(grid, node);
        let k = u
            .position(c)
            .ok_or_else(|| Error::ResolutionMismatch("unfolded field misses an active cell".into()))?;
        values.push(columns[k].evaluate(y).expect("y in closed cell"));
    }
    ScalarField::new(mesh, values)
}

/// `U_ε(Ψ)` at the fine quadrature points.
pub fn average_at_quadrature(grid: &DomainGrid, u: &UnfoldedField) -> Vec<f64> {
    let mesh = grid.mesh();
    let nq = mesh.quadrature().len();
    let columns: Vec<ScalarField> = (0..u.num_cells()).map(|k| u.column_field(k)).collect();
    let mut out = Vec::with_capacity(mesh.num_elements() * nq);
    for e in 0..mesh.num_elements() {
        let k = u.position(grid.cell_of_element(e)).expect("active cell");
        for q in 0..nq {
            let y = grid.local_y(e, mesh.quadrature().points[q]);
            out.push(columns[k].evaluate(y).expect("y in closed cell"));
        }
    }
    out
}

/// `U_ε(∇_y Ψ)` at the fine quadrature points.
pub fn average_y_gradient(grid: &DomainGrid, u: &UnfoldedField) -> Vec<Point> {
    let mesh = grid.mesh();
    let ymesh = u.y_grid().mesh().clone();
    let nq = mesh.quadrature().len();
    let columns: Vec<ScalarField> = (0..u.num_cells()).map(|k| u.column_field(k)).collect();
    let mut out = Vec::with_capacity(mesh.num_elements() * nq);
    for e in 0..mesh.num_elements() {
        let k = u.position(grid.cell_of_element(e)).expect("active cell");
        for q in 0..nq {
            let y = grid.local_y(e, mesh.quadrature().points[q]);
            let (ye, local) = ymesh.locate(y).expect("y in closed cell");
            out.push(columns[k].gradient_at(ye, local));
        }
    }
    out
}

/// `‖φ − T_ε(φ)‖_{L²(Ω×Y)}` with `φ` extended constantly in `y`.
pub fn unfolding_l2_distance(grid: &DomainGrid, phi: &ScalarField, u: &UnfoldedField) -> Result<f64> {
    check_field(grid, phi)?;
    let mesh = grid.mesh();
    let nq = mesh.quadrature().len();
    let n = grid.cells_per_axis().pow(grid.dim() as u32);
    let (mut int_phi, mut int_sq) = (vec![0.0; n], vec![0.0; n]);
    let vals = phi.at_quadrature();
    for e in 0..mesh.num_elements() {
        let c = grid.cell_linear(grid.cell_of_element(e));
        for q in 0..nq {
            let v = vals[e * nq + q];
            int_phi[c] += mesh.quad_weight(q) * v;
            int_sq[c] += mesh.quad_weight(q) * v * v;
        }
    }
    let vol = grid.eps().powi(grid.dim() as i32);
    let mut total = 0.0;
    for (k, c) in u.cells().iter().enumerate() {
        let i = grid.cell_linear(*c);
        let col = u.column_field(k);
        let t_int = col.integral();
        let t_sq = l2_norm(&col).powi(2);
        total += (int_sq[i] + vol * t_sq - 2.0 * int_phi[i] * t_int).max(0.0);
    }
    Ok(total.sqrt())
}

/// Reusable pieces for two-scale decompositions on one domain grid.
#[derive(Debug, Clone)]
pub struct TwoScaleContext {
    m_y: usize,
    projector: PeriodicProjector,
    riesz: PoissonRiesz,
    yq: YQuadrature,
}

impl TwoScaleContext {
    pub fn new(grid: &DomainGrid, m_y: usize, cfg: &SolverConfig) -> Result<Self> {
        let y_grid = build_cell_grid(grid.dim(), m_y)?;
        Ok(TwoScaleContext {
            m_y,
            projector: PeriodicProjector::new(&y_grid, cfg),
            riesz: PoissonRiesz::new(grid.mesh().clone(), cfg),
            yq: YQuadrature::gauss(y_grid.mesh()),
        })
    }

    pub fn riesz(&self) -> &PoissonRiesz {
        &self.riesz
    }

    pub fn y_resolution(&self) -> usize {
        self.m_y
    }
}

/// Result of the constructive two-scale decomposition.
#[derive(Debug, Clone)]
pub struct TwoScale {
    /// `Φ = Q_ε(φ)`
    pub big: ScalarField,
    /// `φ̲ = (φ − Φ)/ε`
    pub under: ScalarField,
    /// Per-cell periodic projection of `T_ε(φ̲)`.
    pub hat: UnfoldedField,
    /// `‖T_ε(∇φ) − ∇φ − ∇_y φ̂‖` in `L²(Y; H⁻¹(Ω))`.
    pub defect: f64,
    /// `‖φ̂‖_{H¹(Y; L²(Ω))}`
    pub hat_norm: f64,
}

/// Splits `φ` into `Φ + ε φ̲` and periodizes the unfolded remainder column by column.
pub fn two_scale_decompose(ctx: &TwoScaleContext, grid: &DomainGrid, phi: &ScalarField) -> Result<TwoScale> {
    let (big, under) = remainder_split(grid, phi)?;
    let unfolded = unfold(grid, &under, ctx.m_y)?;
    let hat = unfolded.with_columns(ctx.projector.project_columns(&unfolded.columns())?)?;

    let mesh = grid.mesh();
    let nq = mesh.quadrature().len();
    let ny = ctx.yq.points.len();
    let eps = grid.eps();
    let ymesh = hat.y_grid().mesh().clone();
    let ynq = ymesh.quadrature().len();

    // T_ε(∇φ) and ∇_y φ̂ per (cell, y-point)
    let cell_tables: Vec<(Vec<Point>, Vec<Point>)> = (0..hat.num_cells())
        .into_par_iter()
        .map(|k| {
            let c = hat.cells()[k];
            let hat_grad = hat.column_field(k).gradient();
            let mut tg = Vec::with_capacity(ny);
            let mut hg = Vec::with_capacity(ny);
            for i in 0..ny {
                let y = ctx.yq.points[i];
                let x = [eps * (c[0] as f64 + y[0]), eps * (c[1] as f64 + y[1])];
                let (e, local) = phi.mesh().locate(x).expect("point of an active cell");
                tg.push(phi.gradient_at(e, local));
                debug_assert_eq!(ymesh.quad_point(i / ynq, i % ynq), y);
                hg.push(hat_grad.values()[i]);
            }
            (tg, hg)
        })
        .collect();
    let elem_pos: Vec<usize> = (0..mesh.num_elements())
        .map(|e| hat.position(grid.cell_of_element(e)).expect("active cell"))
        .collect();
    let grad_phi = phi.gradient();
    let gp = grad_phi.values();
    let defect = mixed_l2y_hminus1x_norm(&ctx.riesz, &ctx.yq, grid.dim(), |i, e, q| {
        let (tg, hg) = &cell_tables[elem_pos[e]];
        let g = gp[e * nq + q];
        [tg[i][0] - g[0] - hg[i][0], tg[i][1] - g[1] - hg[i][1]]
    })?;
    let hat_norm = hat.h1y_norm();
    Ok(TwoScale {
        big,
        under,
        hat,
        defect,
        hat_norm,
    })
}

/// Norms entering the operator estimates for one field on one grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorEstimates {
    pub eps: f64,
    pub l2: f64,
    pub grad: f64,
    /// `‖φ − M_Y^ε φ‖_{L²}`
    pub mean_l2: f64,
    /// `‖φ − M_Y^ε φ‖_{H⁻¹}`
    pub mean_hm1: f64,
    /// `‖φ − T_ε φ‖_{L²(Ω×Y)}`
    pub unfold_l2: f64,
    /// `‖Q_ε φ − M_Y^ε φ‖_{L²}`
    pub q_mean_l2: f64,
    /// `‖φ − Q_ε φ‖_{L²}`
    pub q_l2: f64,
    pub defect: f64,
    pub hat_norm: f64,
}

impl OperatorEstimates {
    /// `‖φ − Mφ‖ / (ε‖∇φ‖)`
    pub fn ratio_mean(&self) -> f64 {
        self.mean_l2 / (self.eps * self.grad)
    }

    /// `‖φ − Mφ‖_{H⁻¹} / (ε‖φ‖)`
    pub fn ratio_mean_hm1(&self) -> f64 {
        self.mean_hm1 / (self.eps * self.l2)
    }

    /// `‖φ − T_ε φ‖ / (ε‖∇φ‖)`
    pub fn ratio_unfold(&self) -> f64 {
        self.unfold_l2 / (self.eps * self.grad)
    }

    /// `‖φ − Q_ε φ‖ / (ε‖∇φ‖)`
    pub fn ratio_q(&self) -> f64 {
        self.q_l2 / (self.eps * self.grad)
    }

    /// `‖Q_ε φ − Mφ‖ / (ε‖∇φ‖)`
    pub fn ratio_q_mean(&self) -> f64 {
        self.q_mean_l2 / (self.eps * self.grad)
    }

    /// `defect / (ε‖∇φ‖)`
    pub fn ratio_defect(&self) -> f64 {
        self.defect / (self.eps * self.grad)
    }

    /// `‖φ̂‖_{H¹(Y;L²)} / ‖∇φ‖`
    pub fn ratio_hat(&self) -> f64 {
        self.hat_norm / self.grad
    }
}

pub fn operator_estimates(grid: &DomainGrid, phi: &ScalarField, m_y: usize, cfg: &SolverConfig) -> Result<OperatorEstimates> {
    check_field(grid, phi)?;
    let ctx = TwoScaleContext::new(grid, m_y, cfg)?;
    let mesh = grid.mesh();
    let vals = phi.at_quadrature();
    let means = means_at_quadrature(grid, &cell_mean(grid, phi)?);
    let diff: Vec<f64> = vals.iter().zip(&means).map(|(a, b)| a - b).collect();
    let q = q_interp(grid, phi)?;
    let qv = q.at_quadrature();
    let q_mean: Vec<f64> = qv.iter().zip(&means).map(|(a, b)| a - b).collect();
    let ts = two_scale_decompose(&ctx, grid, phi)?;
    let full = unfold(grid, phi, grid.sub())?;
    Ok(OperatorEstimates {
        eps: grid.eps(),
        l2: l2_norm(phi),
        grad: phi.gradient().l2_norm(),
        mean_l2: l2_norm_quad(mesh, &diff),
        mean_hm1: ctx.riesz.norm_quad(&diff)?,
        unfold_l2: unfolding_l2_distance(grid, phi, &full)?,
        q_mean_l2: l2_norm_quad(mesh, &q_mean),
        q_l2: l2_norm(&phi.sub(&q)),
        defect: ts.defect,
        hat_norm: ts.hat_norm,
    })
}

/// `‖Pφ‖²` over the active cells and the reflected ring cells reached by macro nodes.
fn extended_cell_mass(grid: &DomainGrid, phi: &ScalarField) -> f64 {
    let sq: Vec<f64> = phi.at_quadrature().iter().map(|v| v * v).collect();
    let vol = grid.eps().powi(grid.dim() as i32);
    let masses: Vec<f64> = cell_means_quad(grid, &sq).iter().map(|m| m * vol).collect();
    let n = grid.cells_per_axis();
    let ny = if grid.dim() == 2 { n + 1 } else { 1 };
    let mut total = 0.0;
    for j in 0..ny {
        for i in 0..=n {
            let xi = [i as i64, j as i64];
            let touches = (0..(1usize << grid.dim())).any(|a| {
                let o = crate::mesh::local_offset(a);
                grid.cell_active([xi[0] - o[0] as i64, xi[1] - o[1] as i64])
            });
            if touches {
                total += mean_or_reflected(grid, &masses, xi).unwrap_or(0.0);
            }
        }
    }
    total
}

/// `‖Q_ε(φ) ψ({·/ε})‖_{L²(Ω)} / (‖Pφ‖_{L²(Ω̃)} ‖ψ‖_{L²(Y)})` with `P` the reflection extension.
pub fn prop32_ratio(grid: &DomainGrid, phi: &ScalarField, psi: &ScalarField) -> Result<f64> {
    check_field(grid, phi)?;
    let q = q_interp(grid, phi)?.at_quadrature();
    let mesh = grid.mesh();
    let nq = mesh.quadrature().len();
    let mut prod = Vec::with_capacity(q.len());
    for e in 0..mesh.num_elements() {
        for qq in 0..nq {
            let y = grid.local_y(e, mesh.quadrature().points[qq]);
            let v = psi.evaluate(y).ok_or_else(|| Error::ResolutionMismatch("ψ must live on Y".into()))?;
            prod.push(q[e * nq + qq] * v);
        }
    }
    let num = l2_norm_quad(mesh, &prod);
    let den = extended_cell_mass(grid, phi).sqrt() * l2_norm(psi);
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_domain_grid, CellMask};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(grid: &DomainGrid, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..grid.num_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ScalarField::new(grid.mesh().clone(), vals).unwrap()
    }

    #[test]
    fn unfold_examples() {
        let g = build_domain_grid(CellMask::full(2, 2), 4).unwrap();
        let c = ScalarField::constant(g.mesh().clone(), 3.5);
        let u = unfold(&g, &c, 4).unwrap();
        for k in 0..u.num_cells() {
            assert!(u.column(k).iter().all(|&v| v == 3.5));
        }
        let x1 = ScalarField::from_fn(g.mesh().clone(), |x| x[0]);
        let u = unfold(&g, &x1, 4).unwrap();
        let k0 = u.position([0, 0]).unwrap();
        let k1 = u.position([1, 0]).unwrap();
        for y in [[0.0, 0.0], [0.25, 0.5], [1.0, 1.0]] {
            assert_abs_diff_eq!(u.value(k0, y), y[0] / 2.0, epsilon = 1e-15);
            assert_abs_diff_eq!(u.value(k1, y), 0.5 + y[0] / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn unfolding_preserves_integrals_and_norms() {
        for mask in [CellMask::full(2, 4), CellMask::l_shape(4).unwrap()] {
            let g = build_domain_grid(mask, 4).unwrap();
            let phi = random_field(&g, 1);
            let u = unfold(&g, &phi, 4).unwrap();
            assert_abs_diff_eq!(u.integral(), phi.integral(), epsilon = 1e-12);
            assert_abs_diff_eq!(u.l2_norm(), l2_norm(&phi), epsilon = 1e-12);
            // coarser y-grid: interpolated, no longer exact
            let coarse = unfold(&g, &phi, 3).unwrap();
            assert_eq!(coarse.y_grid().divisions(), 3);
        }
    }

    #[test]
    fn cell_mean_of_linear_1d() {
        let g = build_domain_grid(CellMask::full(1, 4), 4).unwrap();
        let x1 = ScalarField::from_fn(g.mesh().clone(), |x| x[0]);
        let m = cell_mean(&g, &x1).unwrap();
        for (i, v) in m.iter().enumerate() {
            assert_abs_diff_eq!(*v, (2 * i + 1) as f64 / 8.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn cell_mean_contracts() {
        let g = build_domain_grid(CellMask::l_shape(4).unwrap(), 2).unwrap();
        let phi = random_field(&g, 2);
        let m = means_at_quadrature(&g, &cell_mean(&g, &phi).unwrap());
        assert!(l2_norm_quad(g.mesh(), &m) <= l2_norm(&phi) + 1e-15);
    }

    #[test]
    fn q_interp_examples() {
        let g = build_domain_grid(CellMask::full(1, 8), 4).unwrap();
        let c = ScalarField::constant(g.mesh().clone(), -2.0);
        assert!(q_interp(&g, &c).unwrap().values().iter().all(|v| (v + 2.0).abs() < 1e-15));
        let x1 = ScalarField::from_fn(g.mesh().clone(), |x| x[0]);
        let q = q_interp(&g, &x1).unwrap();
        let eps = g.eps();
        for node in 0..g.num_nodes() {
            let x = g.mesh().node_coords(node)[0];
            // the right boundary ring is reflected, so only interior cells are affine
            if x <= 1.0 - eps {
                assert_abs_diff_eq!(q.values()[node], x + eps / 2.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn split_reconstructs_and_fixes_q1_fields() {
        let g = build_domain_grid(CellMask::full(2, 4), 4).unwrap();
        let phi = random_field(&g, 3);
        let (big, under) = remainder_split(&g, &phi).unwrap();
        for ((p, b), u) in phi.values().iter().zip(big.values()).zip(under.values()) {
            assert!((p - (b + g.eps() * u)).abs() <= 1e-14);
        }
        let c = ScalarField::constant(g.mesh().clone(), 0.25);
        let (b, u) = remainder_split(&g, &c).unwrap();
        assert!(b.values().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(u.values().iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn average_inverts_unfold() {
        let g = build_domain_grid(CellMask::l_shape(4).unwrap(), 4).unwrap();
        let phi = random_field(&g, 4);
        let back = average(&g, &unfold(&g, &phi, 4).unwrap()).unwrap();
        for (a, b) in phi.values().iter().zip(back.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn average_of_cell_function() {
        let g = build_domain_grid(CellMask::full(2, 4), 4).unwrap();
        let yg = build_cell_grid(2, 4).unwrap();
        let gy = |y: Point| (2.0 * PI * y[0]).cos() + y[1] * (1.0 - y[1]);
        let u = UnfoldedField::from_fn(&g, yg.clone(), |_, y| gy(y)).unwrap();
        let avg = average(&g, &u).unwrap();
        for node in 0..g.num_nodes() {
            let (_, frac) = g.split_node(node);
            let (_, y) = node_cell(&g, node);
            let expect = gy(y);
            assert_abs_diff_eq!(avg.values()[node], expect, epsilon = 1e-14);
            if frac != [0.0, 0.0] {
                assert_abs_diff_eq!(avg.values()[node], gy(frac), epsilon = 1e-14);
            }
        }
        // ‖U_ε(∇_y ψ)‖_{L²(Ω)} = ‖∇_y ψ‖_{L²(Y)} on the unit square
        let psi = ScalarField::from_fn(yg.mesh().clone(), gy);
        let grads = average_y_gradient(&g, &u);
        let sq: Vec<f64> = grads.iter().map(|v| v[0] * v[0] + v[1] * v[1]).collect();
        assert_abs_diff_eq!(g.mesh().integrate(&sq).sqrt(), psi.gradient().l2_norm(), epsilon = 1e-12);
    }

    #[test]
    fn unfolding_distance_oracle() {
        let g = build_domain_grid(CellMask::full(2, 4), 4).unwrap();
        let phi = random_field(&g, 5);
        let u = unfold(&g, &phi, 4).unwrap();
        let d = unfolding_l2_distance(&g, &phi, &u).unwrap();
        let means = means_at_quadrature(&g, &cell_mean(&g, &phi).unwrap());
        let diff: Vec<f64> = phi.at_quadrature().iter().zip(&means).map(|(a, b)| a - b).collect();
        assert_abs_diff_eq!(d, 2f64.sqrt() * l2_norm_quad(g.mesh(), &diff), epsilon = 1e-12);
    }

    #[test]
    fn periodic_oscillation_decomposes() {
        let cfg = SolverConfig::default();
        let eta = |y: Point| (2.0 * PI * y[0]).sin() * (2.0 * PI * y[1]).cos() + 0.3;
        let mut ratios = Vec::new();
        for n in [4, 8] {
            let g = build_domain_grid(CellMask::full(2, n), 8).unwrap();
            let eps = g.eps();
            let phi = ScalarField::from_fn(g.mesh().clone(), |x| {
                eps * eta([(x[0] / eps).fract(), (x[1] / eps).fract()])
            });
            let ctx = TwoScaleContext::new(&g, 8, &cfg).unwrap();
            let ts = two_scale_decompose(&ctx, &g, &phi).unwrap();
            // interior cells see η − mean(η) up to the Q_ε correction
            let k = ts.hat.position([1, 1]).unwrap();
            let col = ts.hat.column_field(k);
            let ygrid = ts.hat.y_grid().mesh().clone();
            let mut err: f64 = 0.0;
            for j in 0..ygrid.num_nodes() {
                let y = ygrid.node_coords(j);
                err = err.max((col.values()[j] - (eta(y) - 0.3)).abs());
            }
            assert!(err < 0.15, "cell column error {err}");
            ratios.push(ts.defect / eps);
        }
        assert!(ratios[1] / ratios[0] < 2.0, "{ratios:?}");
    }

    #[test]
    fn zero_remainder_decomposition() {
        let g = build_domain_grid(CellMask::full(2, 4), 4).unwrap();
        let c = ScalarField::constant(g.mesh().clone(), 1.0);
        let ctx = TwoScaleContext::new(&g, 4, &SolverConfig::default()).unwrap();
        let ts = two_scale_decompose(&ctx, &g, &c).unwrap();
        assert!(ts.hat_norm < 1e-10);
        assert!(ts.defect < 1e-10);
    }

    #[test]
    fn prop32_bound_on_random_fields() {
        let g = build_domain_grid(CellMask::l_shape(4).unwrap(), 4).unwrap();
        let yg = build_cell_grid(2, 4).unwrap();
        let psi = ScalarField::from_fn(yg.mesh().clone(), |y| (2.0 * PI * y[0]).cos() + 0.5);
        for seed in 0..5 {
            let r = prop32_ratio(&g, &random_field(&g, seed), &psi).unwrap();
            assert!(r <= 4.0, "ratio {r}");
        }
    }
}
