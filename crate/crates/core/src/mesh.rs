//! Structured Q1 grids on the unit cell and on cell-aligned domains.
//!
//! Both grid kinds share one [`Mesh`] representation: a uniform lattice of
//! `divisions` elements per axis over `[0,1]^dim` of which a subset is active.
//! Nodes are numbered compactly over the active elements in lexicographic
//! lattice order (axis 0 fastest).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type Point = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

const NONE: usize = usize::MAX;
const LATTICE_TOL: f64 = 1e-10;

/// Two-point Gauss abscissae on `[0,1]`.
pub const GAUSS_1D: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Tensor Gauss rule on the reference element `[0,1]^dim`; weights sum to 1.
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn gauss(dim: usize) -> Self {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        if dim == 1 {
            for &g in &GAUSS_1D {
                points.push([g, 0.0]);
                weights.push(0.5);
            }
        } else {
            for &g1 in &GAUSS_1D {
                for &g0 in &GAUSS_1D {
                    points.push([g0, g1]);
                    weights.push(0.25);
                }
            }
        }
        Quadrature { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Lattice offset of local node `a` (bit k = offset along axis k).
#[inline]
pub fn local_offset(a: usize) -> [usize; 2] {
    [a & 1, (a >> 1) & 1]
}

/// Q1 shape function `a` at reference coordinates.
#[inline]
pub fn shape_value(dim: usize, a: usize, local: Point) -> f64 {
    let off = local_offset(a);
    let mut v = 1.0;
    for k in 0..dim {
        v *= if off[k] == 1 { local[k] } else { 1.0 - local[k] };
    }
    v
}

/// Gradient of Q1 shape function `a` with respect to reference coordinates.
#[inline]
pub fn shape_grad_ref(dim: usize, a: usize, local: Point) -> Point {
    let off = local_offset(a);
    let mut g = [0.0; 2];
    for k in 0..dim {
        let mut v = if off[k] == 1 { 1.0 } else { -1.0 };
        for l in 0..dim {
            if l != k {
                v *= if off[l] == 1 { local[l] } else { 1.0 - local[l] };
            }
        }
        g[k] = v;
    }
    g
}

#[derive(Debug, Clone, Copy)]
pub struct Element {
    /// Lattice coordinates of the lower-left node.
    pub corner: [usize; 2],
    /// Compact node indices; only the first `2^dim` are meaningful.
    pub nodes: [usize; 4],
}

#[derive(Debug)]
pub struct Mesh {
    dim: usize,
    divisions: usize,
    h: f64,
    node_of_lattice: Vec<usize>,
    lattice_of_node: Vec<[usize; 2]>,
    element_of_lattice: Vec<usize>,
    elements: Vec<Element>,
    boundary: Vec<bool>,
    quad: Quadrature,
    shape_q: Vec<[f64; 4]>,
    grad_q: Vec<[Point; 4]>,
}

impl Mesh {
    /// Builds the mesh of all lattice elements for which `active` holds.
    pub fn from_active_elements(
        dim: usize,
        divisions: usize,
        active: impl Fn([usize; 2]) -> bool,
    ) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidGrid(format!("unsupported dimension {dim}")));
        }
        if divisions == 0 {
            return Err(Error::InvalidGrid("zero divisions".into()));
        }
        let l = divisions;
        let ny = if dim == 2 { l } else { 1 };
        let nodes_y = if dim == 2 { l + 1 } else { 1 };
        let npe = 1usize << dim;

        let mut element_active = vec![false; l * ny];
        for j in 0..ny {
            for i in 0..l {
                element_active[i + l * j] = active([i, j]);
            }
        }

        let mut node_used = vec![false; (l + 1) * nodes_y];
        for j in 0..ny {
            for i in 0..l {
                if element_active[i + l * j] {
                    for a in 0..npe {
                        let o = local_offset(a);
                        node_used[(i + o[0]) + (l + 1) * (j + o[1])] = true;
                    }
                }
            }
        }

        let mut node_of_lattice = vec![NONE; node_used.len()];
        let mut lattice_of_node = Vec::new();
        for j in 0..nodes_y {
            for i in 0..=l {
                let li = i + (l + 1) * j;
                if node_used[li] {
                    node_of_lattice[li] = lattice_of_node.len();
                    lattice_of_node.push([i, j]);
                }
            }
        }

        let mut element_of_lattice = vec![NONE; l * ny];
        let mut elements = Vec::new();
        for j in 0..ny {
            for i in 0..l {
                if element_active[i + l * j] {
                    let mut nodes = [NONE; 4];
                    for (a, slot) in nodes.iter_mut().enumerate().take(npe) {
                        let o = local_offset(a);
                        *slot = node_of_lattice[(i + o[0]) + (l + 1) * (j + o[1])];
                    }
                    element_of_lattice[i + l * j] = elements.len();
                    elements.push(Element {
                        corner: [i, j],
                        nodes,
                    });
                }
            }
        }
        if elements.is_empty() {
            return Err(Error::InvalidGrid("no active elements".into()));
        }

        // A node is on the boundary when one of the elements around it is missing.
        let boundary = lattice_of_node
            .iter()
            .map(|&[i, j]| {
                (0..npe).any(|a| {
                    let o = local_offset(a);
                    let (Some(ei), Some(ej)) = (i.checked_sub(o[0]), j.checked_sub(o[1])) else {
                        return true;
                    };
                    if ei >= l || (dim == 2 && ej >= l) {
                        return true;
                    }
                    !element_active[ei + l * ej]
                })
            })
            .collect();

        let h = 1.0 / l as f64;
        let quad = Quadrature::gauss(dim);
        let mut shape_q = Vec::with_capacity(quad.len());
        let mut grad_q = Vec::with_capacity(quad.len());
        for p in &quad.points {
            let mut s = [0.0; 4];
            let mut g = [[0.0; 2]; 4];
            for a in 0..npe {
                s[a] = shape_value(dim, a, *p);
                let gr = shape_grad_ref(dim, a, *p);
                g[a] = [gr[0] / h, gr[1] / h];
            }
            shape_q.push(s);
            grad_q.push(g);
        }

        Ok(Mesh {
            dim,
            divisions: l,
            h,
            node_of_lattice,
            lattice_of_node,
            element_of_lattice,
            elements,
            boundary,
            quad,
            shape_q,
            grad_q,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Elements per axis of the bounding lattice.
    pub fn divisions(&self) -> usize {
        self.divisions
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Measure of one element.
    pub fn element_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn nodes_per_element(&self) -> usize {
        1 << self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.lattice_of_node.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quad
    }

    /// Shape values at quadrature point `q`.
    pub fn shape_at(&self, q: usize) -> &[f64; 4] {
        &self.shape_q[q]
    }

    /// Physical shape gradients at quadrature point `q`.
    pub fn grad_at(&self, q: usize) -> &[Point; 4] {
        &self.grad_q[q]
    }

    pub fn node_lattice(&self, node: usize) -> [usize; 2] {
        self.lattice_of_node[node]
    }

    pub fn node_coords(&self, node: usize) -> Point {
        let [i, j] = self.lattice_of_node[node];
        if self.dim == 1 {
            [i as f64 * self.h, 0.0]
        } else {
            [i as f64 * self.h, j as f64 * self.h]
        }
    }

    pub fn node_at(&self, lattice: [usize; 2]) -> Option<usize> {
        let l = self.divisions;
        if lattice[0] > l || (self.dim == 2 && lattice[1] > l) {
            return None;
        }
        let idx = lattice[0] + (l + 1) * if self.dim == 2 { lattice[1] } else { 0 };
        match self.node_of_lattice[idx] {
            NONE => None,
            n => Some(n),
        }
    }

    pub fn element_at(&self, corner: [usize; 2]) -> Option<usize> {
        let l = self.divisions;
        if corner[0] >= l || (self.dim == 2 && corner[1] >= l) {
            return None;
        }
        let idx = corner[0] + l * if self.dim == 2 { corner[1] } else { 0 };
        match self.element_of_lattice[idx] {
            NONE => None,
            e => Some(e),
        }
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        self.boundary[node]
    }

    /// True when both meshes cover the same lattice with the same active elements.
    pub fn same_layout(&self, other: &Mesh) -> bool {
        self.dim == other.dim
            && self.divisions == other.divisions
            && self.element_of_lattice == other.element_of_lattice
    }

    /// Physical coordinates of a reference point in element `e`.
    pub fn map_point(&self, e: usize, local: Point) -> Point {
        let c = self.elements[e].corner;
        let mut x = [0.0; 2];
        for k in 0..self.dim {
            x[k] = (c[k] as f64 + local[k]) * self.h;
        }
        x
    }

    /// Physical coordinates of quadrature point `q` in element `e`.
    pub fn quad_point(&self, e: usize, q: usize) -> Point {
        self.map_point(e, self.quad.points[q])
    }

    /// Physical weight (reference weight times element volume) of quadrature point `q`.
    pub fn quad_weight(&self, q: usize) -> f64 {
        self.quad.weights[q] * self.element_volume()
    }

    /// Integral of a quantity given at quadrature points (`e * nq + q` layout).
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let nq = self.quad.len();
        debug_assert_eq!(values.len(), nq * self.num_elements());
        let mut sum = 0.0;
        for chunk in values.chunks(nq) {
            for (q, v) in chunk.iter().enumerate() {
                sum += self.quad.weights[q] * v;
            }
        }
        sum * self.element_volume()
    }

    /// Finds an active element containing `x` (closed elements) and the reference coordinates.
    pub fn locate(&self, x: Point) -> Option<(usize, Point)> {
        let l = self.divisions as f64;
        let mut cands = [[NONE; 2]; 2];
        for k in 0..self.dim {
            let t = x[k] / self.h;
            if t < -LATTICE_TOL || t > l + LATTICE_TOL {
                return None;
            }
            let r = t.round();
            let base = (t.floor().max(0.0) as usize).min(self.divisions - 1);
            cands[k][0] = base;
            if (t - r).abs() < LATTICE_TOL && r >= 1.0 {
                let below = r as usize - 1;
                if below != base && below < self.divisions {
                    cands[k][1] = below;
                }
            }
        }
        let ys: &[usize] = if self.dim == 2 { &cands[1] } else { &[0, NONE] };
        for &cy in ys {
            if cy == NONE {
                continue;
            }
            for &cx in &cands[0] {
                if cx == NONE {
                    continue;
                }
                if let Some(e) = self.element_at([cx, cy]) {
                    let mut local = [0.0; 2];
                    let corner = [cx, cy];
                    for k in 0..self.dim {
                        local[k] = (x[k] / self.h - corner[k] as f64).clamp(0.0, 1.0);
                    }
                    return Some((e, local));
                }
            }
        }
        None
    }
}

/// Nodal Q1 field on a mesh.
#[derive(Debug, Clone)]
pub struct ScalarField {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.num_nodes() {
            return Err(Error::InvalidGrid(format!(
                "field has {} values for {} nodes",
                values.len(),
                mesh.num_nodes()
            )));
        }
        Ok(ScalarField { mesh, values })
    }

    pub fn zeros(mesh: Arc<Mesh>) -> Self {
        let n = mesh.num_nodes();
        ScalarField {
            mesh,
            values: vec![0.0; n],
        }
    }

    pub fn constant(mesh: Arc<Mesh>, c: f64) -> Self {
        let n = mesh.num_nodes();
        ScalarField {
            mesh,
            values: vec![c; n],
        }
    }

    /// Nodal interpolant of `f`.
    pub fn from_fn(mesh: Arc<Mesh>, f: impl Fn(Point) -> f64) -> Self {
        let values = (0..mesh.num_nodes())
            .map(|n| f(mesh.node_coords(n)))
            .collect();
        ScalarField { mesh, values }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value_at(&self, e: usize, local: Point) -> f64 {
        let dim = self.mesh.dim();
        let el = &self.mesh.elements()[e];
        (0..self.mesh.nodes_per_element())
            .map(|a| self.values[el.nodes[a]] * shape_value(dim, a, local))
            .sum()
    }

    pub fn gradient_at(&self, e: usize, local: Point) -> Point {
        let dim = self.mesh.dim();
        let h = self.mesh.h();
        let el = &self.mesh.elements()[e];
        let mut g = [0.0; 2];
        for a in 0..self.mesh.nodes_per_element() {
            let gr = shape_grad_ref(dim, a, local);
            let v = self.values[el.nodes[a]];
            g[0] += v * gr[0] / h;
            g[1] += v * gr[1] / h;
        }
        g
    }

    /// Q1 evaluation at an arbitrary point of the closed domain.
    pub fn evaluate(&self, x: Point) -> Option<f64> {
        self.mesh.locate(x).map(|(e, local)| self.value_at(e, local))
    }

    /// Values at all quadrature points, `e * nq + q` layout.
    pub fn at_quadrature(&self) -> Vec<f64> {
        let m = &self.mesh;
        let nq = m.quadrature().len();
        let npe = m.nodes_per_element();
        let mut out = Vec::with_capacity(m.num_elements() * nq);
        for el in m.elements() {
            for q in 0..nq {
                let s = m.shape_at(q);
                out.push((0..npe).map(|a| s[a] * self.values[el.nodes[a]]).sum());
            }
        }
        out
    }

    pub fn gradient(&self) -> VectorField {
        let m = &self.mesh;
        let nq = m.quadrature().len();
        let npe = m.nodes_per_element();
        let mut out = Vec::with_capacity(m.num_elements() * nq);
        for el in m.elements() {
            for q in 0..nq {
                let g = m.grad_at(q);
                let mut v = [0.0; 2];
                for a in 0..npe {
                    let u = self.values[el.nodes[a]];
                    v[0] += u * g[a][0];
                    v[1] += u * g[a][1];
                }
                out.push(v);
            }
        }
        VectorField {
            mesh: self.mesh.clone(),
            values: out,
        }
    }

    /// Integral over the mesh (exact for Q1).
    pub fn integral(&self) -> f64 {
        self.mesh.integrate(&self.at_quadrature())
    }

    pub fn axpy(&mut self, alpha: f64, other: &ScalarField) {
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += alpha * o;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ScalarField {
        ScalarField {
            mesh: self.mesh.clone(),
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

/// Vector quantity sampled at the quadrature points of every element.
#[derive(Debug, Clone)]
pub struct VectorField {
    mesh: Arc<Mesh>,
    values: Vec<Point>,
}

impl VectorField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<Point>) -> Result<Self> {
        let expected = mesh.num_elements() * mesh.quadrature().len();
        if values.len() != expected {
            return Err(Error::InvalidGrid(format!(
                "vector field has {} samples, expected {expected}",
                values.len()
            )));
        }
        Ok(VectorField { mesh, values })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[Point] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        let sq: Vec<f64> = self
            .values
            .iter()
            .map(|v| v[0] * v[0] + v[1] * v[1])
            .collect();
        self.mesh.integrate(&sq).sqrt()
    }

    pub fn l2_distance(&self, other: &VectorField) -> f64 {
        let sq: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .collect();
        self.mesh.integrate(&sq).sqrt()
    }
}

/// Discretization of the unit cell `Y = (0,1)^dim`.
#[derive(Debug, Clone)]
pub struct CellGrid {
    m: usize,
    mesh: Arc<Mesh>,
}

pub fn build_cell_grid(dim: usize, m: usize) -> Result<CellGrid> {
    if !(1..=2).contains(&dim) {
        return Err(Error::InvalidGrid(format!("unsupported dimension {dim}")));
    }
    if m < 2 {
        return Err(Error::InvalidGrid(format!("need at least 2 divisions, got {m}")));
    }
    let mesh = Mesh::from_active_elements(dim, m, |_| true)?;
    Ok(CellGrid {
        m,
        mesh: Arc::new(mesh),
    })
}

impl CellGrid {
    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn divisions(&self) -> usize {
        self.m
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    /// Node index from lattice coordinates; every lattice node exists on a cell grid.
    pub fn node(&self, i: usize, j: usize) -> usize {
        i + (self.m + 1) * if self.dim() == 2 { j } else { 0 }
    }
}

/// Occupancy of the `N^dim` lattice of ε-cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    dim: usize,
    n: usize,
    active: Vec<bool>,
}

impl CellMask {
    pub fn full(dim: usize, n: usize) -> Self {
        CellMask {
            dim,
            n,
            active: vec![true; n.pow(dim as u32)],
        }
    }

    /// Unit square minus its upper-right quadrant; `n` must be even.
    pub fn l_shape(n: usize) -> Result<Self> {
        if !n.is_multiple_of(2) || n == 0 {
            return Err(Error::InvalidGrid(format!(
                "L-shape needs an even number of cells per axis, got {n}"
            )));
        }
        let half = n / 2;
        let mut active = vec![true; n * n];
        for j in half..n {
            for i in half..n {
                active[i + n * j] = false;
            }
        }
        Ok(CellMask { dim: 2, n, active })
    }

    pub fn from_cells(dim: usize, n: usize, cells: &[[usize; 2]]) -> Result<Self> {
        let mut active = vec![false; n.pow(dim as u32)];
        for c in cells {
            if c[0] >= n || (dim == 2 && c[1] >= n) {
                return Err(Error::InvalidGrid(format!("cell {c:?} out of range")));
            }
            active[c[0] + if dim == 2 { n * c[1] } else { 0 }] = true;
        }
        Ok(CellMask { dim, n, active })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells_per_axis(&self) -> usize {
        self.n
    }

    pub fn is_active(&self, c: [i64; 2]) -> bool {
        let n = self.n as i64;
        if c[0] < 0 || c[0] >= n {
            return false;
        }
        if self.dim == 2 {
            if c[1] < 0 || c[1] >= n {
                return false;
            }
            self.active[(c[0] + n * c[1]) as usize]
        } else {
            c[1] == 0 && self.active[c[0] as usize]
        }
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Number of face-connected components of the active cells.
    pub fn components(&self) -> usize {
        let n = self.n as i64;
        let ny = if self.dim == 2 { n } else { 1 };
        let mut seen = vec![false; self.active.len()];
        let mut count = 0;
        for start in 0..self.active.len() {
            if !self.active[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(c) = queue.pop_front() {
                let ci = [(c as i64) % n, (c as i64) / n];
                for k in 0..self.dim {
                    for d in [-1i64, 1] {
                        let mut nb = ci;
                        nb[k] += d;
                        if nb[0] < 0 || nb[0] >= n || nb[1] < 0 || nb[1] >= ny {
                            continue;
                        }
                        let idx = (nb[0] + n * nb[1]) as usize;
                        if self.active[idx] && !seen[idx] {
                            seen[idx] = true;
                            queue.push_back(idx);
                        }
                    }
                }
            }
        }
        count
    }
}

/// A boundary face of the domain: hyperplane `x[axis] = offset`, spanning `[lo, hi]` along the other axis.
#[derive(Debug, Clone, Copy)]
struct BoundaryFace {
    axis: usize,
    offset: f64,
    lo: f64,
    hi: f64,
}

impl BoundaryFace {
    fn distance(&self, x: Point, dim: usize) -> f64 {
        let d = x[self.axis] - self.offset;
        if dim == 1 {
            return d.abs();
        }
        let o = 1 - self.axis;
        let t = x[o].clamp(self.lo, self.hi);
        d.hypot(x[o] - t)
    }
}

/// Cell-aligned domain `Ω` made of ε-cells, each subdivided into `sub^dim` fine elements.
#[derive(Debug, Clone)]
pub struct DomainGrid {
    mask: CellMask,
    sub: usize,
    mesh: Arc<Mesh>,
    faces: Vec<BoundaryFace>,
}

pub fn build_domain_grid(mask: CellMask, sub: usize) -> Result<DomainGrid> {
    let n = mask.cells_per_axis();
    if n < 2 {
        return Err(Error::InvalidGrid(format!("need at least 2 cells per axis, got {n}")));
    }
    if sub < 2 {
        return Err(Error::InvalidGrid(format!(
            "need at least 2 fine cells per ε-cell, got {sub}"
        )));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let components = mask.components();
    if components != 1 {
        return Err(Error::DisconnectedMask { components });
    }
    let mesh = Mesh::from_active_elements(mask.dim(), n * sub, |e| {
        mask.is_active([(e[0] / sub) as i64, (e[1] / sub) as i64])
    })?;
    let faces = boundary_faces(&mask);
    Ok(DomainGrid {
        mask,
        sub,
        mesh: Arc::new(mesh),
        faces,
    })
}

fn boundary_faces(mask: &CellMask) -> Vec<BoundaryFace> {
    let n = mask.cells_per_axis();
    let eps = 1.0 / n as f64;
    let dim = mask.dim();
    let ny = if dim == 2 { n } else { 1 };
    let mut faces = Vec::new();
    for j in 0..ny {
        for i in 0..n {
            let c = [i as i64, j as i64];
            if !mask.is_active(c) {
                continue;
            }
            for axis in 0..dim {
                for side in [0i64, 1] {
                    let mut nb = c;
                    nb[axis] += 2 * side - 1;
                    if mask.is_active(nb) {
                        continue;
                    }
                    let o = 1 - axis;
                    faces.push(BoundaryFace {
                        axis,
                        offset: (c[axis] + side) as f64 * eps,
                        lo: c[o] as f64 * eps,
                        hi: (c[o] + 1) as f64 * eps,
                    });
                }
            }
        }
    }
    faces
}

impl DomainGrid {
    pub fn dim(&self) -> usize {
        self.mask.dim()
    }

    pub fn mask(&self) -> &CellMask {
        &self.mask
    }

    /// Number of ε-cells per axis (`N = 1/ε`).
    pub fn cells_per_axis(&self) -> usize {
        self.mask.cells_per_axis()
    }

    pub fn eps(&self) -> f64 {
        1.0 / self.cells_per_axis() as f64
    }

    /// Fine elements per ε-cell and axis.
    pub fn sub(&self) -> usize {
        self.sub
    }

    pub fn h(&self) -> f64 {
        self.mesh.h()
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn cell_active(&self, c: [i64; 2]) -> bool {
        self.mask.is_active(c)
    }

    /// Active ε-cells in lexicographic order.
    pub fn active_cells(&self) -> Vec<[usize; 2]> {
        let n = self.cells_per_axis();
        let ny = if self.dim() == 2 { n } else { 1 };
        let mut out = Vec::new();
        for j in 0..ny {
            for i in 0..n {
                if self.mask.is_active([i as i64, j as i64]) {
                    out.push([i, j]);
                }
            }
        }
        out
    }

    /// Linear index of a cell on the full `N^dim` lattice.
    pub fn cell_linear(&self, c: [usize; 2]) -> usize {
        c[0] + if self.dim() == 2 {
            self.cells_per_axis() * c[1]
        } else {
            0
        }
    }

    /// ε-cell containing fine element `e`.
    pub fn cell_of_element(&self, e: usize) -> [usize; 2] {
        let c = self.mesh.elements()[e].corner;
        [c[0] / self.sub, c[1] / self.sub]
    }

    /// Position in `Y` of a reference point of fine element `e`: `{x/ε}`.
    pub fn local_y(&self, e: usize, local: Point) -> Point {
        let c = self.mesh.elements()[e].corner;
        let s = self.sub as f64;
        let mut y = [0.0; 2];
        for k in 0..self.dim() {
            y[k] = ((c[k] % self.sub) as f64 + local[k]) / s;
        }
        y
    }

    /// Splits `x` into `[x/ε]` and `{x/ε}`.
    pub fn split(&self, x: Point) -> ([i64; 2], Point) {
        let n = self.cells_per_axis() as f64;
        let mut cell = [0i64; 2];
        let mut frac = [0.0; 2];
        for k in 0..self.dim() {
            let t = x[k] * n;
            let f = t.floor();
            cell[k] = f as i64;
            frac[k] = t - f;
        }
        (cell, frac)
    }

    /// Splits a fine node exactly through its lattice coordinates.
    pub fn split_node(&self, node: usize) -> ([usize; 2], Point) {
        let l = self.mesh.node_lattice(node);
        let s = self.sub as f64;
        let mut cell = [0; 2];
        let mut frac = [0.0; 2];
        for k in 0..self.dim() {
            cell[k] = l[k] / self.sub;
            frac[k] = (l[k] % self.sub) as f64 / s;
        }
        (cell, frac)
    }

    /// True when `x` lies in the closure of the domain.
    pub fn contains_closed(&self, x: Point) -> bool {
        let n = self.cells_per_axis() as f64;
        let mut cands = [[i64::MIN; 2]; 2];
        for k in 0..self.dim() {
            let t = x[k] * n;
            if t < -LATTICE_TOL || t > n + LATTICE_TOL {
                return false;
            }
            let f = t.floor() as i64;
            cands[k] = [f, f];
            if (t - t.round()).abs() < LATTICE_TOL {
                let r = t.round() as i64;
                cands[k] = [r - 1, r];
            }
        }
        if self.dim() == 1 {
            cands[1] = [0, 0];
        }
        cands[0]
            .iter()
            .any(|&i| cands[1].iter().any(|&j| self.mask.is_active([i, j])))
    }

    /// Euclidean distance from `x ∈ Ω̄` to `∂Ω`.
    pub fn distance_to_boundary(&self, x: Point) -> Result<f64> {
        if !self.contains_closed(x) {
            return Err(Error::OutsideDomain { point: x });
        }
        Ok(self
            .faces
            .iter()
            .map(|f| f.distance(x, self.dim()))
            .fold(f64::INFINITY, f64::min))
    }

    /// The same fine lattice viewed with a different ε-cell size.
    ///
    /// The new mask must select exactly the same fine elements, so fields on
    /// `self` remain valid on the returned grid.
    pub fn with_cells(&self, mask: CellMask) -> Result<DomainGrid> {
        let l = self.mesh.divisions();
        let n = mask.cells_per_axis();
        if n == 0 || !l.is_multiple_of(n) {
            return Err(Error::ResolutionMismatch(format!(
                "{n} cells per axis do not divide {l} fine elements"
            )));
        }
        let sub = l / n;
        let candidate = Mesh::from_active_elements(mask.dim(), l, |e| {
            mask.is_active([(e[0] / sub) as i64, (e[1] / sub) as i64])
        })?;
        if !candidate.same_layout(&self.mesh) {
            return Err(Error::ResolutionMismatch(
                "mask selects a different set of fine elements".into(),
            ));
        }
        let faces = boundary_faces(&mask);
        Ok(DomainGrid {
            mask,
            sub,
            mesh: self.mesh.clone(),
            faces,
        })
    }
}

/// Builtin Y-periodic coefficient families (all isotropic).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    Identity,
    /// `a` for `y₁ < ½`, `b` otherwise.
    Laminate { a: f64, b: f64 },
    /// `a` on the two cells where `y₁ < ½` and `y₂ < ½` agree, `b` on the others.
    Checkerboard { a: f64, b: f64 },
    /// `(2 + cos 2πy₁ cos 2πy₂)`.
    Smooth,
}

/// A Y-periodic, symmetric, uniformly elliptic coefficient `A(y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixField {
    kind: Coefficient,
    scale: f64,
}

impl MatrixField {
    pub fn new(kind: Coefficient) -> Result<Self> {
        match kind {
            Coefficient::Laminate { a, b } | Coefficient::Checkerboard { a, b }
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) =>
            {
                Err(Error::Coefficient(format!("{kind:?}: values must be positive")))
            }
            _ => Ok(MatrixField { kind, scale: 1.0 }),
        }
    }

    pub fn identity() -> Self {
        MatrixField {
            kind: Coefficient::Identity,
            scale: 1.0,
        }
    }

    pub fn kind(&self) -> Coefficient {
        self.kind
    }

    /// The same field multiplied by `t > 0`.
    pub fn scaled(&self, t: f64) -> Self {
        MatrixField {
            kind: self.kind,
            scale: self.scale * t,
        }
    }

    /// Scalar multiplier `a(y)` with `A(y) = a(y) I`.
    pub fn scalar(&self, y: Point) -> f64 {
        let y0 = y[0].rem_euclid(1.0);
        let y1 = y[1].rem_euclid(1.0);
        let a = match self.kind {
            Coefficient::Identity => 1.0,
            Coefficient::Laminate { a, b } => {
                if y0 < 0.5 {
                    a
                } else {
                    b
                }
            }
            Coefficient::Checkerboard { a, b } => {
                if (y0 < 0.5) == (y1 < 0.5) {
                    a
                } else {
                    b
                }
            }
            Coefficient::Smooth => {
                2.0 + (2.0 * std::f64::consts::PI * y0).cos()
                    * (2.0 * std::f64::consts::PI * y1).cos()
            }
        };
        a * self.scale
    }

    /// `A(y)`, sampled through `y mod 1`.
    pub fn sample(&self, y: Point) -> Mat2 {
        let a = self.scalar(y);
        [[a, 0.0], [0.0, a]]
    }

    /// Ellipticity bounds `(c, C)`.
    pub fn bounds(&self) -> (f64, f64) {
        let (lo, hi) = match self.kind {
            Coefficient::Identity => (1.0, 1.0),
            Coefficient::Laminate { a, b } | Coefficient::Checkerboard { a, b } => {
                (a.min(b), a.max(b))
            }
            Coefficient::Smooth => (1.0, 3.0),
        };
        (lo * self.scale, hi * self.scale)
    }

    /// Cell divisions must be a multiple of this for jumps to sit on element faces.
    pub fn alignment(&self) -> usize {
        match self.kind {
            Coefficient::Laminate { .. } | Coefficient::Checkerboard { .. } => 2,
            _ => 1,
        }
    }
}

pub fn sample_coefficient(field: &MatrixField, y: Point) -> Mat2 {
    field.sample(y)
}

impl fmt::Display for MatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            Coefficient::Identity => write!(f, "identity")?,
            Coefficient::Laminate { a, b } => write!(f, "laminate({a},{b})")?,
            Coefficient::Checkerboard { a, b } => write!(f, "checkerboard({a},{b})")?,
            Coefficient::Smooth => write!(f, "smooth")?,
        }
        if self.scale != 1.0 {
            write!(f, "*{}", self.scale)?;
        }
        Ok(())
    }
}

impl FromStr for MatrixField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Coefficient(s.to_string());
        let (body, scale) = match s.split_once('*') {
            Some((b, t)) => (b.trim(), t.trim().parse::<f64>().map_err(|_| bad())?),
            None => (s.trim(), 1.0),
        };
        let two_args = |rest: &str| -> Result<(f64, f64)> {
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(bad)?;
            let (a, b) = inner.split_once(',').ok_or_else(bad)?;
            Ok((
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ))
        };
        let kind = if body == "identity" {
            Coefficient::Identity
        } else if body == "smooth" {
            Coefficient::Smooth
        } else if let Some(rest) = body.strip_prefix("laminate") {
            let (a, b) = two_args(rest)?;
            Coefficient::Laminate { a, b }
        } else if let Some(rest) = body.strip_prefix("checkerboard") {
            let (a, b) = two_args(rest)?;
            Coefficient::Checkerboard { a, b }
        } else {
            return Err(bad());
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(bad());
        }
        Ok(MatrixField::new(kind)?.scaled(scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cell_grid_counts() {
        let g = build_cell_grid(1, 4).unwrap();
        let xs: Vec<f64> = (0..g.num_nodes()).map(|n| g.mesh().node_coords(n)[0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);

        let g = build_cell_grid(2, 2).unwrap();
        assert_eq!(g.num_nodes(), 9);
        assert_eq!(g.mesh().num_elements(), 4);

        let g = build_cell_grid(2, 128).unwrap();
        assert_eq!(g.num_nodes(), 129 * 129);
    }

    #[test]
    fn cell_grid_rejects_bad_input() {
        assert!(build_cell_grid(2, 1).is_err());
        assert!(build_cell_grid(3, 4).is_err());
    }

    #[test]
    fn unit_square_domain() {
        let g = build_domain_grid(CellMask::full(2, 4), 4).unwrap();
        assert_eq!(g.num_nodes(), 17 * 17);
        assert_eq!(g.eps(), 0.25);
        assert_eq!(g.h(), 1.0 / 16.0);
    }

    #[test]
    fn l_shape_node_count_matches_enumeration() {
        let g = build_domain_grid(CellMask::l_shape(2).unwrap(), 2).unwrap();
        assert_eq!(g.active_cells().len(), 3);
        // enumerate lattice points of the closed L by geometry
        let mut count = 0;
        for j in 0..=4 {
            for i in 0..=4 {
                let (x, y) = (i as f64 / 4.0, j as f64 / 4.0);
                if !(x > 0.5 && y > 0.5) {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 21);
        assert_eq!(g.num_nodes(), count);
    }

    #[test]
    fn disconnected_and_empty_masks_rejected() {
        let diag = CellMask::from_cells(2, 2, &[[0, 0], [1, 1]]).unwrap();
        assert!(matches!(
            build_domain_grid(diag, 2),
            Err(Error::DisconnectedMask { components: 2 })
        ));
        let empty = CellMask::from_cells(2, 2, &[]).unwrap();
        assert!(matches!(build_domain_grid(empty, 2), Err(Error::EmptyMask)));
    }

    #[test]
    fn distance_examples() {
        let g = build_domain_grid(CellMask::full(2, 4), 2).unwrap();
        assert_abs_diff_eq!(g.distance_to_boundary([0.5, 0.5]).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.distance_to_boundary([0.1, 0.4]).unwrap(), 0.1, epsilon = 1e-15);
        assert!(g.distance_to_boundary([1.2, 0.4]).is_err());

        let l = build_domain_grid(CellMask::l_shape(2).unwrap(), 2).unwrap();
        let x = [0.45, 0.45];
        // brute force over a dense sampling of the L-shape's boundary polygon
        let corners = [
            [0.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.5],
            [0.5, 0.5],
            [0.5, 1.0],
            [0.0, 1.0],
            [0.0, 0.0],
        ];
        let mut best = f64::INFINITY;
        for w in corners.windows(2) {
            for k in 0..=20_000 {
                let t = k as f64 / 20_000.0;
                let p = [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
                best = best.min((p[0] - x[0]).hypot(p[1] - x[1]));
            }
        }
        let d = l.distance_to_boundary(x).unwrap();
        assert_abs_diff_eq!(d, best, epsilon = 1e-9);
        assert_abs_diff_eq!(d, 0.05 * 2f64.sqrt(), epsilon = 1e-12);
        assert!(l.distance_to_boundary([0.75, 0.75]).is_err());
    }

    #[test]
    fn one_dimensional_distance() {
        let g = build_domain_grid(CellMask::full(1, 4), 4).unwrap();
        assert_abs_diff_eq!(g.distance_to_boundary([0.3, 0.0]).unwrap(), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(g.distance_to_boundary([0.9, 0.0]).unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn coefficient_samples() {
        let id = MatrixField::identity();
        assert_eq!(id.sample([0.3, 0.9]), [[1.0, 0.0], [0.0, 1.0]]);
        let lam: MatrixField = "laminate(1,4)".parse().unwrap();
        assert_eq!(lam.sample([0.75, 0.2]), [[4.0, 0.0], [0.0, 4.0]]);
        assert_eq!(lam.sample([1.75, 0.2]), [[4.0, 0.0], [0.0, 4.0]]);
        assert_eq!(lam.sample([-0.25, 0.2]), [[4.0, 0.0], [0.0, 4.0]]);
        let cb: MatrixField = "checkerboard(1, 100)".parse().unwrap();
        assert_eq!(cb.scalar([0.25, 0.25]), 1.0);
        assert_eq!(cb.scalar([0.75, 0.25]), 100.0);
        assert_eq!(cb.scalar([0.75, 0.75]), 1.0);
        assert!("laminate(1)".parse::<MatrixField>().is_err());
        assert!("laminate(-1,2)".parse::<MatrixField>().is_err());
        assert!("marble".parse::<MatrixField>().is_err());
        let s: MatrixField = "smooth*3".parse().unwrap();
        assert_eq!(s.to_string(), "smooth*3");
    }

    #[test]
    fn ellipticity_on_sample_grid() {
        for spec in ["identity", "laminate(1,4)", "checkerboard(1,100)", "smooth"] {
            let f: MatrixField = spec.parse().unwrap();
            let (c, big_c) = f.bounds();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for j in 0..64 {
                for i in 0..64 {
                    let y = [(i as f64 + 0.5) / 64.0, (j as f64 + 0.5) / 64.0];
                    let a = f.sample(y);
                    // isotropic: every Rayleigh quotient equals the diagonal entry
                    assert_eq!(a[0][1], a[1][0]);
                    lo = lo.min(a[0][0]);
                    hi = hi.max(a[0][0]);
                }
            }
            assert!(lo >= c - 1e-12 && hi <= big_c + 1e-12, "{spec}: [{lo}, {hi}] vs [{c}, {big_c}]");
        }
    }

    #[test]
    fn q1_evaluation_is_exact_for_bilinear() {
        let g = build_cell_grid(2, 5).unwrap();
        let f = |x: Point| 1.0 + 2.0 * x[0] - x[1] + 3.0 * x[0] * x[1];
        let field = ScalarField::from_fn(g.mesh().clone(), f);
        for p in [[0.13, 0.77], [0.4, 0.4], [1.0, 1.0], [0.0, 0.6]] {
            assert_abs_diff_eq!(field.evaluate(p).unwrap(), f(p), epsilon = 1e-13);
        }
        assert_abs_diff_eq!(field.integral(), 1.0 + 1.0 - 0.5 + 0.75, epsilon = 1e-13);
    }

    proptest! {
        #[test]
        fn node_split_is_exact(n_pow in 1u32..4, s_pow in 1u32..4, seed in 0usize..10_000) {
            let n = 1usize << n_pow;
            let sub = 1usize << s_pow;
            let g = build_domain_grid(CellMask::full(2, n), sub).unwrap();
            let node = seed % g.num_nodes();
            let x = g.mesh().node_coords(node);
            let (cell, frac) = g.split_node(node);
            let eps = g.eps();
            for k in 0..2 {
                prop_assert!((0.0..1.0).contains(&frac[k]));
                prop_assert_eq!(eps * cell[k] as f64 + eps * frac[k], x[k]);
            }
        }

        #[test]
        fn distance_is_one_lipschitz(
            a in (0.0f64..1.0, 0.0f64..1.0),
            b in (0.0f64..1.0, 0.0f64..1.0),
        ) {
            let g = build_domain_grid(CellMask::l_shape(4).unwrap(), 2).unwrap();
            let (p, q) = ([a.0, a.1], [b.0, b.1]);
            if g.contains_closed(p) && g.contains_closed(q) {
                let dp = g.distance_to_boundary(p).unwrap();
                let dq = g.distance_to_boundary(q).unwrap();
                prop_assert!((dp - dq).abs() <= (p[0] - q[0]).hypot(p[1] - q[1]) + 1e-12);
            }
        }
    }
}
