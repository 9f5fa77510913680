//! Discretized geometry: the shape catalog, masked Cartesian grids, discrete
//! vector calculus, the Dirichlet eigensolver and the change-of-variables
//! field used by the dual competitor.
//!
//! Curved shapes (disk, annulus, cylinder) live on a masked lattice over the
//! bounding box. Cell volumes are the exact or subsampled measure of the
//! Voronoi box clipped by the analytic shape, so total volume converges to
//! the analytic measure. Surface quadrature carries per-element positions on
//! the analytic boundary together with analytic outward normals.

mod diff;
mod eigen;
mod field;
mod io;
mod logfield;

pub use diff::{boundary_flux, differentiate, interpolate, interpolate_vector, DiffMode};
pub use eigen::{certified_lambda1, dirichlet_lambda1, CertifiedLambda1, Lambda1Result};
pub use field::{Field, Rank};
pub use io::{read_field, read_grid, write_field, write_field_csv, write_grid};
pub use logfield::change_of_variables_field;

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const MASK_SUBSAMPLES: usize = 32;

/// The shape catalog. Curved shapes are masked lattices over the bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Box { origin: Vec<f64>, lengths: Vec<f64> },
    Disk { center: [f64; 2], radius: f64 },
    Annulus { center: [f64; 2], inner: f64, outer: f64 },
    Cylinder { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
}

/// A validated shape plus derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub shape: Shape,
}

impl DomainSpec {
    pub fn new(shape: Shape) -> Result<Self> {
        let spec = DomainSpec { shape };
        spec.validate()?;
        Ok(spec)
    }

    pub fn interval(a: f64, b: f64) -> Result<Self> {
        Self::new(Shape::Box { origin: vec![a], lengths: vec![b - a] })
    }

    pub fn unit_square() -> Self {
        Self::new(Shape::Box { origin: vec![0.0, 0.0], lengths: vec![1.0, 1.0] }).unwrap()
    }

    pub fn unit_box(d: usize) -> Self {
        Self::new(Shape::Box { origin: vec![0.0; d], lengths: vec![1.0; d] }).unwrap()
    }

    pub fn unit_disk() -> Self {
        Self::new(Shape::Disk { center: [0.0, 0.0], radius: 1.0 }).unwrap()
    }

    /// B(0,1) x (0,1).
    pub fn unit_cylinder() -> Self {
        Self::new(Shape::Cylinder { center: [0.0, 0.0], radius: 1.0, z0: 0.0, z1: 1.0 }).unwrap()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidDomain(msg));
        match &self.shape {
            Shape::Box { origin, lengths } => {
                if lengths.is_empty() || origin.len() != lengths.len() {
                    return bad("box origin/lengths dimension mismatch".into());
                }
                if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                    return bad(format!("box lengths must be positive, got {lengths:?}"));
                }
            }
            Shape::Disk { radius, .. } => {
                if !(radius > &0.0) {
                    return bad(format!("disk radius must be positive, got {radius}"));
                }
            }
            Shape::Annulus { inner, outer, .. } => {
                if !(*inner > 0.0 && outer > inner) {
                    return bad(format!("annulus radii must satisfy 0 < inner < outer, got {inner}, {outer}"));
                }
            }
            Shape::Cylinder { radius, z0, z1, .. } => {
                if !(*radius > 0.0 && z1 > z0) {
                    return bad(format!("cylinder needs radius > 0 and z1 > z0, got {radius}, {z0}, {z1}"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            Shape::Box { lengths, .. } => lengths.len(),
            Shape::Disk { .. } | Shape::Annulus { .. } => 2,
            Shape::Cylinder { .. } => 3,
        }
    }

    /// Analytic Lebesgue measure of the domain.
    pub fn measure(&self) -> f64 {
        use std::f64::consts::PI;
        match &self.shape {
            Shape::Box { lengths, .. } => lengths.iter().product(),
            Shape::Disk { radius, .. } => PI * radius * radius,
            Shape::Annulus { inner, outer, .. } => PI * (outer * outer - inner * inner),
            Shape::Cylinder { radius, z0, z1, .. } => PI * radius * radius * (z1 - z0),
        }
    }

    /// Analytic surface measure of the boundary.
    pub fn surface_measure(&self) -> f64 {
        use std::f64::consts::PI;
        match &self.shape {
            Shape::Box { lengths, .. } => {
                let d = lengths.len();
                if d == 1 {
                    return 2.0;
                }
                let vol: f64 = lengths.iter().product();
                (0..d).map(|a| 2.0 * vol / lengths[a]).sum()
            }
            Shape::Disk { radius, .. } => 2.0 * PI * radius,
            Shape::Annulus { inner, outer, .. } => 2.0 * PI * (inner + outer),
            Shape::Cylinder { radius, z0, z1, .. } => {
                2.0 * PI * radius * radius + 2.0 * PI * radius * (z1 - z0)
            }
        }
    }

    /// Bounding box as (origin, lengths).
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.shape {
            Shape::Box { origin, lengths } => (origin.clone(), lengths.clone()),
            Shape::Disk { center, radius } => (
                vec![center[0] - radius, center[1] - radius],
                vec![2.0 * radius, 2.0 * radius],
            ),
            Shape::Annulus { center, outer, .. } => (
                vec![center[0] - outer, center[1] - outer],
                vec![2.0 * outer, 2.0 * outer],
            ),
            Shape::Cylinder { center, radius, z0, z1 } => (
                vec![center[0] - radius, center[1] - radius, *z0],
                vec![2.0 * radius, 2.0 * radius, z1 - z0],
            ),
        }
    }

    /// Signed distance to the boundary, negative inside. Exact for the catalog.
    pub fn signed_distance(&self, p: &[f64]) -> f64 {
        match &self.shape {
            Shape::Box { origin, lengths } => {
                let mut inside: f64 = f64::NEG_INFINITY;
                let mut out_sq = 0.0;
                for a in 0..lengths.len() {
                    let lo = origin[a] - p[a];
                    let hi = p[a] - (origin[a] + lengths[a]);
                    let d = lo.max(hi);
                    if d > 0.0 {
                        out_sq += d * d;
                    }
                    inside = inside.max(d);
                }
                if out_sq > 0.0 {
                    out_sq.sqrt()
                } else {
                    inside
                }
            }
            Shape::Disk { center, radius } => {
                ((p[0] - center[0]).hypot(p[1] - center[1])) - radius
            }
            Shape::Annulus { center, inner, outer } => {
                let r = (p[0] - center[0]).hypot(p[1] - center[1]);
                (r - outer).max(inner - r)
            }
            Shape::Cylinder { center, radius, z0, z1 } => {
                let dr = (p[0] - center[0]).hypot(p[1] - center[1]) - radius;
                let dz = (z0 - p[2]).max(p[2] - z1);
                if dr > 0.0 && dz > 0.0 {
                    dr.hypot(dz)
                } else {
                    dr.max(dz)
                }
            }
        }
    }

    /// True when the mask in the first two axes is a disk or annulus.
    fn radial_mask(&self) -> Option<([f64; 2], f64, f64)> {
        match &self.shape {
            Shape::Disk { center, radius } => Some((*center, 0.0, *radius)),
            Shape::Annulus { center, inner, outer } => Some((*center, *inner, *outer)),
            Shape::Cylinder { center, radius, .. } => Some((*center, 0.0, *radius)),
            Shape::Box { .. } => None,
        }
    }

    pub fn is_masked(&self) -> bool {
        self.radial_mask().is_some()
    }
}

/// Node classification on the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum NodeClass {
    Interior,
    Boundary,
    Exterior,
}

/// One element of the discrete surface quadrature. `position` lies on the
/// analytic boundary, `normal` is the analytic outward unit normal there,
/// and `node` is the lattice node carrying field values for the element.
#[derive(Debug, Clone)]
pub struct SurfaceElement {
    pub node: usize,
    pub position: [f64; 3],
    pub normal: [f64; 3],
    pub weight: f64,
}

/// Discretized domain: lattice over the bounding box with per-node class,
/// clipped cell volumes and a surface quadrature.
#[derive(Debug)]
pub struct Grid {
    pub spec: DomainSpec,
    pub resolution: Vec<usize>,
    /// Nodes per axis (resolution + 1).
    pub npts: Vec<usize>,
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
    /// Max spacing over axes; the `h` entering tolerances.
    pub h: f64,
    pub node_count: usize,
    pub class: Vec<NodeClass>,
    /// Clipped Voronoi cell volume per node; zero at exterior nodes.
    pub volumes: Vec<f64>,
    /// Lattice indices of non-exterior nodes, ascending.
    pub in_nodes: Vec<u32>,
    /// Nodes whose Voronoi box overlaps the domain: the in-nodes plus, on
    /// masked shapes, exterior nodes whose box still clips the boundary.
    /// Quadrature sources (pushforward, lift) iterate these.
    pub source_nodes: Vec<u32>,
    /// Lattice indices of interior nodes, ascending.
    pub interior_nodes: Vec<u32>,
    /// Lattice indices of boundary nodes, ascending.
    pub boundary_nodes: Vec<u32>,
    /// Representative outward unit normal per entry of `boundary_nodes`.
    pub boundary_normals: Vec<[f64; 3]>,
    pub surface: Vec<SurfaceElement>,
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    #[inline]
    pub fn node_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for a in 0..multi.len() {
            idx = idx * self.npts[a] + multi[a];
        }
        idx
    }

    #[inline]
    pub fn node_multi(&self, mut idx: usize) -> [usize; 3] {
        let d = self.dim();
        let mut multi = [0usize; 3];
        for a in (0..d).rev() {
            multi[a] = idx % self.npts[a];
            idx /= self.npts[a];
        }
        multi
    }

    #[inline]
    pub fn node_position(&self, idx: usize) -> [f64; 3] {
        let multi = self.node_multi(idx);
        let mut p = [0.0; 3];
        for a in 0..self.dim() {
            p[a] = self.origin[a] + multi[a] as f64 * self.spacing[a];
        }
        p
    }

    #[inline]
    pub fn is_in(&self, idx: usize) -> bool {
        self.class[idx] != NodeClass::Exterior
    }

    /// Neighbor lattice index along `axis` in direction `dir` (+1/-1), if it
    /// stays on the lattice.
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, dir: isize) -> Option<usize> {
        let multi = self.node_multi(idx);
        let i = multi[axis] as isize + dir;
        if i < 0 || i as usize >= self.npts[axis] {
            return None;
        }
        let stride: usize = self.npts[axis + 1..self.dim()].iter().product();
        Some((idx as isize + dir * stride as isize) as usize)
    }

    pub fn total_volume(&self) -> f64 {
        crate::numeric::par_sum(&self.volumes)
    }

    /// Reference cell volume (product of spacings).
    pub fn cell_reference_volume(&self) -> f64 {
        self.spacing[..self.dim()].iter().product()
    }
}

/// Build a grid over `spec` with `resolution` cells per axis.
pub fn build_grid(spec: &DomainSpec, resolution: usize) -> Result<Arc<Grid>> {
    spec.validate()?;
    if resolution < 2 {
        return Err(CoreError::InvalidDomain(format!(
            "resolution must be at least 2, got {resolution}"
        )));
    }
    let d = spec.dim();
    let (origin, lengths) = spec.bounding_box();
    let resolution = vec![resolution; d];
    let npts: Vec<usize> = resolution.iter().map(|&n| n + 1).collect();
    let spacing: Vec<f64> = (0..d).map(|a| lengths[a] / resolution[a] as f64).collect();
    let h = spacing.iter().cloned().fold(0.0, f64::max);
    let node_count: usize = npts.iter().product();

    let mut grid = Grid {
        spec: spec.clone(),
        resolution,
        npts,
        origin,
        spacing,
        h,
        node_count,
        class: vec![NodeClass::Exterior; node_count],
        volumes: vec![0.0; node_count],
        in_nodes: Vec::new(),
        source_nodes: Vec::new(),
        interior_nodes: Vec::new(),
        boundary_nodes: Vec::new(),
        boundary_normals: Vec::new(),
        surface: Vec::new(),
    };

    classify_nodes(&mut grid)?;
    compute_volumes(&mut grid);
    build_surface(&mut grid);

    if grid.interior_nodes.is_empty() {
        return Err(CoreError::EmptyInterior);
    }
    Ok(Arc::new(grid))
}

/// On-boundary test with a tolerance tied to the lattice.
fn on_boundary_eps(grid: &Grid) -> f64 {
    1e-9 * grid.h
}

fn classify_nodes(grid: &mut Grid) -> Result<()> {
    let d = grid.dim();
    let eps = on_boundary_eps(grid);
    // First pass: inside/outside by signed distance.
    let mut inside = vec![false; grid.node_count];
    for idx in 0..grid.node_count {
        let p = grid.node_position(idx);
        inside[idx] = grid.spec.signed_distance(&p[..d]) <= eps;
    }
    // Second pass: boundary = inside node on the analytic boundary or with an
    // outside axis neighbor (or at the lattice edge for box shapes).
    for idx in 0..grid.node_count {
        if !inside[idx] {
            grid.class[idx] = NodeClass::Exterior;
            continue;
        }
        let p = grid.node_position(idx);
        let sd = grid.spec.signed_distance(&p[..d]);
        let mut boundary = sd.abs() <= eps;
        if !boundary {
            'axes: for a in 0..d {
                for dir in [-1isize, 1] {
                    match grid.neighbor(idx, a, dir) {
                        Some(nb) => {
                            if !inside[nb] {
                                boundary = true;
                                break 'axes;
                            }
                        }
                        None => {
                            boundary = true;
                            break 'axes;
                        }
                    }
                }
            }
        }
        grid.class[idx] = if boundary { NodeClass::Boundary } else { NodeClass::Interior };
    }
    for idx in 0..grid.node_count {
        match grid.class[idx] {
            NodeClass::Interior => grid.interior_nodes.push(idx as u32),
            NodeClass::Boundary => grid.boundary_nodes.push(idx as u32),
            NodeClass::Exterior => {}
        }
        if grid.class[idx] != NodeClass::Exterior {
            grid.in_nodes.push(idx as u32);
        }
    }
    // Representative normals.
    grid.boundary_normals = grid
        .boundary_nodes
        .iter()
        .map(|&idx| representative_normal(grid, idx as usize))
        .collect();
    Ok(())
}

fn representative_normal(grid: &Grid, idx: usize) -> [f64; 3] {
    let d = grid.dim();
    let p = grid.node_position(idx);
    let multi = grid.node_multi(idx);
    let mut n = [0.0; 3];
    match &grid.spec.shape {
        Shape::Box { .. } => {
            for a in 0..d {
                if multi[a] == 0 {
                    n[a] -= 1.0;
                }
                if multi[a] == grid.npts[a] - 1 {
                    n[a] += 1.0;
                }
            }
        }
        Shape::Disk { center, .. } => {
            let r = (p[0] - center[0]).hypot(p[1] - center[1]).max(1e-300);
            n[0] = (p[0] - center[0]) / r;
            n[1] = (p[1] - center[1]) / r;
        }
        Shape::Annulus { center, inner, outer } => {
            let r = (p[0] - center[0]).hypot(p[1] - center[1]).max(1e-300);
            let sign = if (r - inner).abs() < (outer - r).abs() { -1.0 } else { 1.0 };
            n[0] = sign * (p[0] - center[0]) / r;
            n[1] = sign * (p[1] - center[1]) / r;
        }
        Shape::Cylinder { center, radius, z0, z1 } => {
            let r = (p[0] - center[0]).hypot(p[1] - center[1]).max(1e-300);
            let wall = grid
                .neighbor(idx, 0, 1)
                .map(|nb| !grid.is_in(nb))
                .unwrap_or(true)
                || grid.neighbor(idx, 0, -1).map(|nb| !grid.is_in(nb)).unwrap_or(true)
                || grid.neighbor(idx, 1, 1).map(|nb| !grid.is_in(nb)).unwrap_or(true)
                || grid.neighbor(idx, 1, -1).map(|nb| !grid.is_in(nb)).unwrap_or(true)
                || (r - radius).abs() <= on_boundary_eps(grid);
            if wall {
                n[0] = (p[0] - center[0]) / r;
                n[1] = (p[1] - center[1]) / r;
            }
            if (p[2] - z0).abs() <= on_boundary_eps(grid) {
                n[2] -= 1.0;
            }
            if (p[2] - z1).abs() <= on_boundary_eps(grid) {
                n[2] += 1.0;
            }
        }
    }
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if norm > 0.0 {
        [n[0] / norm, n[1] / norm, n[2] / norm]
    } else {
        // Isolated staircase corner: fall back to the radial direction.
        let r = p[0].hypot(p[1]).max(1e-300);
        [p[0] / r, p[1] / r, 0.0]
    }
}

/// 1-D Voronoi extent of lattice index i along an axis, clipped to the box.
#[inline]
fn axis_cell(origin: f64, spacing: f64, npts: usize, i: usize) -> (f64, f64) {
    let x = origin + i as f64 * spacing;
    let lo = if i == 0 { x } else { x - 0.5 * spacing };
    let hi = if i == npts - 1 { x } else { x + 0.5 * spacing };
    (lo, hi)
}

/// Route a point of the closed domain to the non-exterior node nearest to it:
/// per-axis rounding first, then an outward block search when the rounded
/// node is exterior. Volumes and pushforward deposits share this partition.
pub(crate) fn route_to_in_node(grid: &Grid, y: &[f64]) -> Option<usize> {
    let d = grid.dim();
    let mut multi = [0usize; 3];
    for a in 0..d {
        let t = (y[a] - grid.origin[a]) / grid.spacing[a];
        multi[a] = (t + 0.5).floor().clamp(0.0, (grid.npts[a] - 1) as f64) as usize;
    }
    let idx = grid.node_index(&multi[..d]);
    if grid.class[idx] != NodeClass::Exterior {
        return Some(idx);
    }
    for radius in [1isize, 2, 3] {
        let mut best: Option<(f64, usize)> = None;
        let r = |a: usize| if a < d { radius } else { 0 };
        for o0 in -r(0)..=r(0) {
            for o1 in -r(1)..=r(1) {
                for o2 in -r(2)..=r(2) {
                    let offsets = [o0, o1, o2];
                    let mut cand = [0usize; 3];
                    let mut valid = true;
                    for a in 0..d {
                        let i = multi[a] as isize + offsets[a];
                        if i < 0 || i as usize >= grid.npts[a] {
                            valid = false;
                            break;
                        }
                        cand[a] = i as usize;
                    }
                    if !valid {
                        continue;
                    }
                    let cidx = grid.node_index(&cand[..d]);
                    if grid.class[cidx] == NodeClass::Exterior {
                        continue;
                    }
                    let p = grid.node_position(cidx);
                    let mut dist = 0.0;
                    for a in 0..d {
                        dist += (p[a] - y[a]).powi(2);
                    }
                    if best.map(|(b, _)| dist < b).unwrap_or(true) {
                        best = Some((dist, cidx));
                    }
                }
            }
        }
        if let Some((_, cidx)) = best {
            return Some(cidx);
        }
    }
    None
}

fn compute_volumes(grid: &mut Grid) {
    let d = grid.dim();
    let radial = grid.spec.radial_mask();
    let cell_volume = |idx: usize| -> f64 {
        let multi = grid.node_multi(idx);
        let mut extents = [(0.0, 0.0); 3];
        for a in 0..d {
            extents[a] = axis_cell(grid.origin[a], grid.spacing[a], grid.npts[a], multi[a]);
        }
        match radial {
            None => (0..d).map(|a| extents[a].1 - extents[a].0).product(),
            Some((center, inner, outer)) => {
                let area = masked_cell_area(center, inner, outer, extents[0], extents[1]);
                if d == 3 {
                    area * (extents[2].1 - extents[2].0)
                } else {
                    area
                }
            }
        }
    };
    let mut volumes = vec![0.0; grid.node_count];
    for &idx32 in &grid.in_nodes {
        let idx = idx32 as usize;
        volumes[idx] = cell_volume(idx);
    }
    if radial.is_none() {
        grid.volumes = volumes;
        grid.source_nodes = grid.in_nodes.clone();
        return;
    }
    // Exterior cells can still clip the curved domain. They are recorded as
    // quadrature sources and their content is routed pointwise through the
    // same nearest-in-node partition the pushforward deposits use, keeping
    // density estimates consistent.
    grid.volumes = volumes;
    let (center, inner, outer) = radial.unwrap();
    let mut extra: Vec<(usize, f64)> = Vec::new();
    let mut extra_sources: Vec<u32> = Vec::new();
    for idx in 0..grid.node_count {
        if grid.class[idx] != NodeClass::Exterior {
            continue;
        }
        let multi = grid.node_multi(idx);
        let ex = axis_cell(grid.origin[0], grid.spacing[0], grid.npts[0], multi[0]);
        let ey = axis_cell(grid.origin[1], grid.spacing[1], grid.npts[1], multi[1]);
        if masked_cell_area(center, inner, outer, ex, ey) <= 0.0 {
            continue;
        }
        extra_sources.push(idx as u32);
        let zvol = if d == 3 {
            let ez = axis_cell(grid.origin[2], grid.spacing[2], grid.npts[2], multi[2]);
            ez.1 - ez.0
        } else {
            1.0
        };
        let m = MASK_SUBSAMPLES;
        let (sx, sy) = ((ex.1 - ex.0) / m as f64, (ey.1 - ey.0) / m as f64);
        let quantum = sx * sy * zvol;
        let zc = grid.node_position(idx)[2];
        for i in 0..m {
            let px = ex.0 + (i as f64 + 0.5) * sx;
            for j in 0..m {
                let py = ey.0 + (j as f64 + 0.5) * sy;
                let r = (px - center[0]).hypot(py - center[1]);
                if r < inner || r > outer {
                    continue;
                }
                let point = [px, py, zc];
                if let Some(target) = route_to_in_node(grid, &point[..d]) {
                    extra.push((target, quantum));
                }
            }
        }
    }
    for (nb, sliver) in extra {
        grid.volumes[nb] += sliver;
    }
    let mut sources = grid.in_nodes.clone();
    sources.extend(extra_sources);
    sources.sort_unstable();
    grid.source_nodes = sources;
}

/// Area of a rectangle clipped by the annulus {inner <= |p - c| <= outer}.
/// Cells not straddling either circle are resolved exactly; straddling cells
/// use midpoint subsampling.
fn masked_cell_area(
    center: [f64; 2],
    inner: f64,
    outer: f64,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
) -> f64 {
    let full = (x1 - x0) * (y1 - y0);
    if full <= 0.0 {
        return 0.0;
    }
    let straddles = |r: f64| -> bool {
        if r <= 0.0 {
            return false;
        }
        let dx = if center[0] < x0 {
            x0 - center[0]
        } else if center[0] > x1 {
            center[0] - x1
        } else {
            0.0
        };
        let dy = if center[1] < y0 {
            y0 - center[1]
        } else if center[1] > y1 {
            center[1] - y1
        } else {
            0.0
        };
        let dmin = dx.hypot(dy);
        let dmax = (x0 - center[0])
            .abs()
            .max((x1 - center[0]).abs())
            .hypot((y0 - center[1]).abs().max((y1 - center[1]).abs()));
        dmin <= r && r <= dmax
    };
    if !straddles(inner) && !straddles(outer) {
        let cx = 0.5 * (x0 + x1) - center[0];
        let cy = 0.5 * (y0 + y1) - center[1];
        let r = cx.hypot(cy);
        return if r >= inner && r <= outer { full } else { 0.0 };
    }
    let m = MASK_SUBSAMPLES;
    let (sx, sy) = ((x1 - x0) / m as f64, (y1 - y0) / m as f64);
    let mut count = 0usize;
    for i in 0..m {
        let px = x0 + (i as f64 + 0.5) * sx - center[0];
        for j in 0..m {
            let py = y0 + (j as f64 + 0.5) * sy - center[1];
            let r = px.hypot(py);
            if r >= inner && r <= outer {
                count += 1;
            }
        }
    }
    full * count as f64 / (m * m) as f64
}

fn build_surface(grid: &mut Grid) {
    let d = grid.dim();
    match grid.spec.shape.clone() {
        Shape::Box { .. } => build_box_surface(grid),
        Shape::Disk { center, radius } => {
            let els = circle_surface(grid, center, radius, 1.0, None);
            grid.surface.extend(els);
        }
        Shape::Annulus { center, inner, outer } => {
            let els_o = circle_surface(grid, center, outer, 1.0, None);
            let els_i = circle_surface(grid, center, inner, -1.0, None);
            grid.surface.extend(els_o);
            grid.surface.extend(els_i);
        }
        Shape::Cylinder { center, radius, z0, z1 } => {
            // Caps: every in-node of the top/bottom layer carries its 2-D
            // clipped cell area.
            for (zi, zval, nz) in [(0usize, z0, -1.0), (grid.npts[2] - 1, z1, 1.0)] {
                for &idx32 in &grid.in_nodes {
                    let idx = idx32 as usize;
                    let multi = grid.node_multi(idx);
                    if multi[2] != zi {
                        continue;
                    }
                    let ex = axis_cell(grid.origin[0], grid.spacing[0], grid.npts[0], multi[0]);
                    let ey = axis_cell(grid.origin[1], grid.spacing[1], grid.npts[1], multi[1]);
                    let area = masked_cell_area(center, 0.0, radius, ex, ey);
                    if area <= 0.0 {
                        continue;
                    }
                    let p = grid.node_position(idx);
                    grid.surface.push(SurfaceElement {
                        node: idx,
                        position: [p[0], p[1], zval],
                        normal: [0.0, 0.0, nz],
                        weight: area,
                    });
                }
            }
            // Wall: per z-layer, arc-Voronoi weights on the circle times the
            // 1-D z-weight.
            for zi in 0..grid.npts[2] {
                let (zlo, zhi) = axis_cell(grid.origin[2], grid.spacing[2], grid.npts[2], zi);
                let wz = zhi - zlo;
                if wz <= 0.0 {
                    continue;
                }
                let layer = Some((2usize, zi));
                let els = circle_surface(grid, center, radius, 1.0, layer);
                for mut e in els {
                    e.weight *= wz;
                    grid.surface.push(e);
                }
            }
        }
    }
    debug_assert!(grid.surface.iter().all(|e| e.weight >= 0.0));
    let _ = d;
}

fn build_box_surface(grid: &mut Grid) {
    let d = grid.dim();
    if d == 1 {
        let last = grid.npts[0] - 1;
        let p0 = grid.node_position(0);
        let p1 = grid.node_position(last);
        grid.surface.push(SurfaceElement {
            node: 0,
            position: p0,
            normal: [-1.0, 0.0, 0.0],
            weight: 1.0,
        });
        grid.surface.push(SurfaceElement {
            node: last,
            position: p1,
            normal: [1.0, 0.0, 0.0],
            weight: 1.0,
        });
        return;
    }
    for axis in 0..d {
        for (side, sgn) in [(0usize, -1.0), (grid.npts[axis] - 1, 1.0)] {
            let mut normal = [0.0; 3];
            normal[axis] = sgn;
            for idx in 0..grid.node_count {
                let multi = grid.node_multi(idx);
                if multi[axis] != side {
                    continue;
                }
                let mut w = 1.0;
                for b in 0..d {
                    if b == axis {
                        continue;
                    }
                    let (lo, hi) = axis_cell(grid.origin[b], grid.spacing[b], grid.npts[b], multi[b]);
                    w *= hi - lo;
                }
                grid.surface.push(SurfaceElement {
                    node: idx,
                    position: grid.node_position(idx),
                    normal,
                    weight: w,
                });
            }
        }
    }
}

/// Arc-Voronoi quadrature on the circle of radius `r`: boundary nodes nearest
/// to this circle are projected onto it and weighted by half the angular gap
/// to their neighbors. `layer` restricts to one lattice layer along an axis
/// (used for cylinder walls).
fn circle_surface(
    grid: &Grid,
    center: [f64; 2],
    r: f64,
    orient: f64,
    layer: Option<(usize, usize)>,
) -> Vec<SurfaceElement> {
    let mut ring: Vec<(f64, usize)> = Vec::new();
    for (bi, &idx32) in grid.boundary_nodes.iter().enumerate() {
        let idx = idx32 as usize;
        let multi = grid.node_multi(idx);
        if let Some((axis, layer_idx)) = layer {
            if multi[axis] != layer_idx {
                continue;
            }
            // Exclude pure cap-interior nodes: on the cap layers only nodes
            // that are also radially on the staircase belong to the wall ring.
            let n = grid.boundary_normals[bi];
            if n[0] == 0.0 && n[1] == 0.0 {
                continue;
            }
            if layer_idx == 0 || layer_idx == grid.npts[axis] - 1 {
                let p = grid.node_position(idx);
                let rad = (p[0] - center[0]).hypot(p[1] - center[1]);
                if (rad - r).abs() > grid.h * 1.5 {
                    continue;
                }
            }
        }
        let p = grid.node_position(idx);
        let rad = (p[0] - center[0]).hypot(p[1] - center[1]);
        // Assign the node to the circle it is closest to (annulus has two).
        if (rad - r).abs() > grid.h * 1.5 {
            continue;
        }
        if let Shape::Annulus { inner, outer, .. } = grid.spec.shape {
            let other = if (r - outer).abs() < 1e-12 { inner } else { outer };
            if (rad - other).abs() < (rad - r).abs() {
                continue;
            }
        }
        let theta = (p[1] - center[1]).atan2(p[0] - center[0]);
        ring.push((theta, idx));
    }
    if ring.is_empty() {
        return Vec::new();
    }
    ring.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let m = ring.len();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let (theta, idx) = ring[i];
        let prev = ring[(i + m - 1) % m].0;
        let next = ring[(i + 1) % m].0;
        let gap_prev = (theta - prev).rem_euclid(2.0 * std::f64::consts::PI);
        let gap_next = (next - theta).rem_euclid(2.0 * std::f64::consts::PI);
        let arc = 0.5 * (gap_prev + gap_next) * r;
        let (ct, st) = (theta.cos(), theta.sin());
        let p = grid.node_position(idx);
        let pos = if grid.dim() == 3 {
            [center[0] + r * ct, center[1] + r * st, p[2]]
        } else {
            [center[0] + r * ct, center[1] + r * st, 0.0]
        };
        out.push(SurfaceElement {
            node: idx,
            position: pos,
            normal: [orient * ct, orient * st, 0.0],
            weight: arc,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn interval_nodes_and_spacing() {
        let spec = DomainSpec::interval(0.0, 1.0).unwrap();
        let g = build_grid(&spec, 4).unwrap();
        assert_eq!(g.node_count, 5);
        assert_abs_diff_eq!(g.h, 0.25, epsilon = 1e-15);
        assert_eq!(g.boundary_nodes.len(), 2);
        assert_eq!(g.interior_nodes.len(), 3);
        assert_abs_diff_eq!(g.total_volume(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_square_volume_exact() {
        let g = build_grid(&DomainSpec::unit_square(), 32).unwrap();
        assert_abs_diff_eq!(g.total_volume(), 1.0, epsilon = 1e-6);
        // 4 edges of 31 interior edge nodes + 4 corners
        assert_eq!(g.boundary_nodes.len(), 4 * 31 + 4);
    }

    #[test]
    fn disk_volume_within_one_percent() {
        let g = build_grid(&DomainSpec::unit_disk(), 64).unwrap();
        let v = g.total_volume();
        assert!((v - PI).abs() / PI < 0.01, "disk area {v} vs {PI}");
        // and already at the invariant resolution
        let g32 = build_grid(&DomainSpec::unit_disk(), 32).unwrap();
        assert!((g32.total_volume() - PI).abs() / PI < 0.01);
    }

    #[test]
    fn annulus_and_cylinder_volumes() {
        let spec = DomainSpec::new(Shape::Annulus {
            center: [0.0, 0.0],
            inner: 0.4,
            outer: 1.0,
        })
        .unwrap();
        let g = build_grid(&spec, 64).unwrap();
        let exact = spec.measure();
        assert!((g.total_volume() - exact).abs() / exact < 0.01);

        let cyl = DomainSpec::unit_cylinder();
        let gc = build_grid(&cyl, 32).unwrap();
        assert!((gc.total_volume() - PI).abs() / PI < 0.01);
    }

    #[test]
    fn surface_weights_match_perimeter() {
        let g = build_grid(&DomainSpec::unit_square(), 32).unwrap();
        let s: f64 = g.surface.iter().map(|e| e.weight).sum();
        assert_abs_diff_eq!(s, 4.0, epsilon = 1e-9);

        let gd = build_grid(&DomainSpec::unit_disk(), 64).unwrap();
        let sd: f64 = gd.surface.iter().map(|e| e.weight).sum();
        assert_abs_diff_eq!(sd, 2.0 * PI, epsilon = 1e-9);

        let gc = build_grid(&DomainSpec::unit_cylinder(), 24).unwrap();
        let sc: f64 = gc.surface.iter().map(|e| e.weight).sum();
        let exact = gc.spec.surface_measure();
        assert!((sc - exact).abs() / exact < 0.02, "cylinder surface {sc} vs {exact}");
    }

    #[test]
    fn normals_are_unit() {
        for spec in [
            DomainSpec::unit_square(),
            DomainSpec::unit_disk(),
            DomainSpec::unit_cylinder(),
        ] {
            let g = build_grid(&spec, 16).unwrap();
            for n in &g.boundary_normals {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert_abs_diff_eq!(len, 1.0, epsilon = 1e-12);
            }
            for e in &g.surface {
                let len = (e.normal[0] * e.normal[0]
                    + e.normal[1] * e.normal[1]
                    + e.normal[2] * e.normal[2])
                    .sqrt();
                assert_abs_diff_eq!(len, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn interior_nodes_strictly_inside() {
        let g = build_grid(&DomainSpec::unit_disk(), 24).unwrap();
        for &i in &g.interior_nodes {
            let p = g.node_position(i as usize);
            assert!(g.spec.signed_distance(&p[..2]) < 0.0);
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(DomainSpec::interval(1.0, 1.0).is_err());
        assert!(DomainSpec::new(Shape::Disk { center: [0.0; 2], radius: 0.0 }).is_err());
        let spec = DomainSpec::unit_square();
        assert!(build_grid(&spec, 1).is_err());
    }
}

/// Test scaffolding: expose the deposit partition for diagnostics.
pub fn debug_route(grid: &Grid, y: &[f64]) -> Option<usize> {
    route_to_in_node(grid, y)
}
