//! Pushforward of the reference volume under a deformation, by deterministic
//! subcell quadrature: every lattice cell overlapping the domain splits into
//! subsamples^d equal subcells; subcell centers inside the domain each carry
//! their subcell volume into the target cell of the nearest-in-node deposit
//! partition.
//!
//! Densities are measured against reference volumes accumulated in the same
//! pass by routing the identical sample set through the identity map, so an
//! exactly measure-preserving map reports density one up to the binning of
//! the map itself, not of the domain geometry.

use super::ProblemSpec;
use crate::domain::{differentiate, route_to_in_node, DiffMode, Field, Grid, NodeClass, Rank};
use crate::error::{CoreError, Result};
use crate::numeric::REDUCE_CHUNK;
use rayon::prelude::*;
use std::sync::Arc;

/// Nonnegative cell masses on the target grid, with the reference volumes of
/// the generating sample set.
#[derive(Debug, Clone)]
pub struct MeasureOnD {
    pub grid: Arc<Grid>,
    pub masses: Vec<f64>,
    /// Identity-routed volume of the same sample partition; the denominator
    /// for densities.
    pub ref_volumes: Vec<f64>,
    pub total_mass: f64,
}

impl MeasureOnD {
    pub fn density(&self, node: usize) -> f64 {
        let v = self.ref_volumes[node];
        if v > 0.0 {
            self.masses[node] / v
        } else {
            0.0
        }
    }

    /// Uniform measure with the grid's own volumes as masses.
    pub fn uniform(grid: Arc<Grid>) -> Self {
        let masses = grid.volumes.clone();
        let ref_volumes = grid.volumes.clone();
        let total_mass = crate::numeric::pairwise_sum(&masses);
        MeasureOnD { grid, masses, ref_volumes, total_mass }
    }

    /// Max density deviation from 1, measured against max(reference volume,
    /// half the nominal cell) so boundary slivers do not amplify single
    /// binning quanta. Adjacent boundary cells of a binned measure oscillate
    /// in opposite directions, so this is a diagnostic; feasibility checks
    /// use the total-variation deviation below.
    pub fn max_uniform_deviation(&self) -> f64 {
        let floor = 0.5 * self.grid.cell_reference_volume();
        let mut worst = 0.0f64;
        for &idx32 in &self.grid.in_nodes {
            let idx = idx32 as usize;
            let v = self.ref_volumes[idx];
            let dev = (self.masses[idx] - v).abs() / v.max(floor);
            worst = worst.max(dev);
        }
        worst
    }

    /// Total-variation distance to the uniform measure, relative to the total
    /// volume: sum |mass - ref| / sum ref.
    pub fn tv_uniform_deviation(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &idx32 in &self.grid.in_nodes {
            let idx = idx32 as usize;
            num += (self.masses[idx] - self.ref_volumes[idx]).abs();
            den += self.ref_volumes[idx];
        }
        if den > 0.0 {
            num / den
        } else {
            f64::INFINITY
        }
    }
}

/// Locate the deposit cell for an image point: the nearest-in-node partition
/// shared with the reference volumes. Points farther than `tol` outside the
/// closed domain are rejected.
fn deposit_node(grid: &Grid, y: &[f64], tol: f64) -> Result<usize> {
    let d = grid.dim();
    let sd = grid.spec.signed_distance(&y[..d]);
    if sd > tol {
        return Err(CoreError::ImageOutsideTarget { dist: sd, tol });
    }
    route_to_in_node(grid, &y[..d]).ok_or(CoreError::ImageOutsideTarget { dist: sd.max(0.0), tol })
}

/// Deposit a mass box of half-extents `ext` centered at `y`, splitting it
/// over target cells by exact per-axis overlap. Nearest-node deposits for a
/// rotated lattice of sample points alias at resonant angles; overlap
/// splatting varies smoothly with the image position. Shares falling on
/// exterior nodes are routed to the nearest in-node. Conserves `vol` exactly.
pub(crate) fn splat_deposit<F: FnMut(usize, f64)>(
    grid: &Grid,
    y: &[f64],
    ext: &[f64],
    vol: f64,
    tol: f64,
    sink: &mut F,
) -> Result<()> {
    let d = grid.dim();
    let sd = grid.spec.signed_distance(&y[..d]);
    if sd > tol {
        return Err(CoreError::ImageOutsideTarget { dist: sd, tol });
    }
    // Per-axis overlapped lattice cells: (index, length, piece midpoint).
    let mut axis_pieces: [Vec<(usize, f64, f64)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut covered = [1.0f64; 3];
    for a in 0..d {
        let h = grid.spacing[a];
        let bb_lo = grid.origin[a];
        let bb_hi = grid.origin[a] + grid.resolution[a] as f64 * h;
        // extents capped at 1.5 cells: wider boxes mean the linearization is
        // not trustworthy anyway
        let e = ext[a].min(1.5 * h);
        let lo = (y[a] - e).clamp(bb_lo, bb_hi);
        let hi = (y[a] + e).clamp(bb_lo, bb_hi);
        if hi - lo <= 1e-14 * h {
            let i = (((y[a] - bb_lo) / h + 0.5).floor()).clamp(0.0, (grid.npts[a] - 1) as f64)
                as usize;
            axis_pieces[a].push((i, 1.0, y[a].clamp(bb_lo, bb_hi)));
            covered[a] = 1.0;
            continue;
        }
        let i_lo = (((lo - bb_lo) / h + 0.5).floor()).clamp(0.0, (grid.npts[a] - 1) as f64) as usize;
        let i_hi = (((hi - bb_lo) / h + 0.5).floor()).clamp(0.0, (grid.npts[a] - 1) as f64) as usize;
        let mut total = 0.0;
        for i in i_lo..=i_hi {
            let x = bb_lo + i as f64 * h;
            let cell_lo = if i == 0 { bb_lo } else { x - 0.5 * h };
            let cell_hi = if i == grid.npts[a] - 1 { bb_hi } else { x + 0.5 * h };
            let seg_lo = lo.max(cell_lo);
            let seg_hi = hi.min(cell_hi);
            let len = seg_hi - seg_lo;
            if len > 0.0 {
                axis_pieces[a].push((i, len, 0.5 * (seg_lo + seg_hi)));
                total += len;
            }
        }
        if axis_pieces[a].is_empty() {
            let i = (((y[a] - bb_lo) / h + 0.5).floor()).clamp(0.0, (grid.npts[a] - 1) as f64)
                as usize;
            axis_pieces[a].push((i, 1.0, y[a].clamp(bb_lo, bb_hi)));
            total = 1.0;
        }
        covered[a] = total;
    }
    let fallback = route_to_in_node(grid, &y[..d]);
    let one = vec![(0usize, 1.0, 0.0)];
    let pieces0 = &axis_pieces[0];
    let pieces1 = if d > 1 { &axis_pieces[1] } else { &one };
    let pieces2 = if d > 2 { &axis_pieces[2] } else { &one };
    for &(i0, l0, m0) in pieces0 {
        for &(i1, l1, m1) in pieces1 {
            for &(i2, l2, m2) in pieces2 {
                let share = vol * (l0 / covered[0])
                    * if d > 1 { l1 / covered[1] } else { 1.0 }
                    * if d > 2 { l2 / covered[2] } else { 1.0 };
                if share <= 0.0 {
                    continue;
                }
                let multi = [i0, i1, i2];
                let idx = grid.node_index(&multi[..d]);
                if grid.class[idx] != NodeClass::Exterior {
                    sink(idx, share);
                    continue;
                }
                let mid = [m0, m1, m2];
                match route_to_in_node(grid, &mid[..d]).or(fallback) {
                    Some(node) => sink(node, share),
                    None => {
                        return Err(CoreError::ImageOutsideTarget { dist: sd.max(0.0), tol })
                    }
                }
            }
        }
    }
    Ok(())
}

/// Half-extents of the linearized image of a subcell with per-axis steps.
#[inline]
pub(crate) fn image_extents(grad: &Field, base: usize, step: &[f64], out: &mut [f64]) {
    let d = step.len();
    let k = out.len();
    let g = grad.node_slice(base);
    for j in 0..k {
        let mut e = 0.0;
        for a in 0..d {
            e += g[j * d + a].abs() * step[a];
        }
        out[j] = 0.5 * e;
    }
}

/// Visit the subcells of a lattice cell: `f(center, step, subcell_volume)`
/// for each of subsamples^d equal subdivisions of the per-axis Voronoi extent
/// whose center lies inside the (closed) domain.
pub(crate) fn for_each_subcell<F: FnMut(&[f64], &[f64], f64)>(
    grid: &Grid,
    node: usize,
    subsamples: usize,
    f: &mut F,
) {
    let d = grid.dim();
    let masked = grid.spec.is_masked();
    let multi = grid.node_multi(node);
    let mut lo = [0.0; 3];
    let mut step = [0.0; 3];
    let mut sub_vol = 1.0;
    for a in 0..d {
        let x = grid.origin[a] + multi[a] as f64 * grid.spacing[a];
        let cell_lo = if multi[a] == 0 { x } else { x - 0.5 * grid.spacing[a] };
        let cell_hi = if multi[a] == grid.npts[a] - 1 { x } else { x + 0.5 * grid.spacing[a] };
        lo[a] = cell_lo;
        step[a] = (cell_hi - cell_lo) / subsamples as f64;
        sub_vol *= step[a];
    }
    if sub_vol <= 0.0 {
        return;
    }
    let total_subs = subsamples.pow(d as u32);
    let mut counter = [0usize; 3];
    for _ in 0..total_subs {
        let mut center = [0.0; 3];
        for a in 0..d {
            center[a] = lo[a] + (counter[a] as f64 + 0.5) * step[a];
        }
        let inside = !masked || grid.spec.signed_distance(&center[..d]) <= 0.0;
        if inside {
            f(&center[..d], &step[..d], sub_vol);
        }
        let mut a = 0;
        while a < d {
            counter[a] += 1;
            if counter[a] == subsamples {
                counter[a] = 0;
                a += 1;
            } else {
                break;
            }
        }
    }
}

/// Evaluate u at a point of the cell anchored at `base` (a non-exterior
/// node) via first-order expansion: exact for affine maps and O(h^2) in
/// general, independent of the zeroed exterior lattice values.
#[inline]
pub(crate) fn taylor_image(u: &Field, grad: &Field, base: usize, point: &[f64], out: &mut [f64]) {
    let grid = &u.grid;
    let d = grid.dim();
    let k = out.len();
    let p = grid.node_position(base);
    let vals = u.node_slice(base);
    let g = grad.node_slice(base);
    for j in 0..k {
        let mut v = vals[j];
        for a in 0..d {
            v += g[j * d + a] * (point[a] - p[a]);
        }
        out[j] = v;
    }
}

/// Pushforward of the source volume under u onto the target grid. The total
/// mass equals the sum of accepted subcell volumes exactly, and the measure
/// carries the identity-routed reference volumes of the same sample set.
pub fn pushforward(u: &Field, grid_target: &Arc<Grid>, subsamples: usize) -> Result<MeasureOnD> {
    if subsamples < 1 {
        return Err(CoreError::PreconditionViolated("subsamples must be at least 1".into()));
    }
    let k = match u.rank {
        Rank::Vector(k) if k == grid_target.dim() => k,
        _ => {
            return Err(CoreError::RankMismatch {
                op: "pushforward",
                expected: "vector matching the target dimension",
                got: u.rank.to_string(),
            })
        }
    };
    u.validate()?;
    let grid = &u.grid;
    let grad = differentiate(u, DiffMode::Gradient)?;
    let tol = grid_target.h;
    let same_grid = Arc::ptr_eq(grid, grid_target)
        || (grid.spec == grid_target.spec && grid.resolution == grid_target.resolution);
    // Reference volumes route the identity image through the very same code
    // path, so a map that equals the identity bitwise reports density one
    // exactly, and measure-preserving maps are compared against the binning
    // of an identical sample set.
    let (id_field, id_grad) = if same_grid {
        let d = grid.dim();
        let idf = Field::from_fn(grid.clone(), Rank::Vector(d), |p, out| {
            out.copy_from_slice(&p[..d])
        });
        let idg = differentiate(&idf, DiffMode::Gradient)?;
        (Some(idf), Some(idg))
    } else {
        (None, None)
    };
    // Fixed-size chunks of source nodes accumulate into private dense bins;
    // chunk results merge in index order so deposits are thread-count
    // independent.
    let nodes = &grid.source_nodes;
    let nchunks = nodes.len().div_ceil(REDUCE_CHUNK);
    let partials: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(nodes.len());
            let mut mass_bins = vec![0.0; grid_target.node_count];
            let mut ref_bins = vec![0.0; grid_target.node_count];
            let mut failure = None;
            for &idx32 in &nodes[lo..hi] {
                let idx = idx32 as usize;
                let anchored = grid.class[idx] != NodeClass::Exterior;
                let mut visit = |center: &[f64], step: &[f64], vol: f64| {
                    if failure.is_some() {
                        return;
                    }
                    let base = if anchored {
                        Some(idx)
                    } else {
                        route_to_in_node(grid, center)
                    };
                    let Some(base) = base else {
                        return;
                    };
                    let mut y = [0.0; 3];
                    let mut ext = [0.0; 3];
                    taylor_image(u, &grad, base, center, &mut y[..k]);
                    image_extents(&grad, base, step, &mut ext[..k]);
                    if let Err(e) = splat_deposit(grid_target, &y[..k], &ext[..k], vol, tol, &mut |node, share| {
                        mass_bins[node] += share;
                    }) {
                        failure = Some(e);
                        return;
                    }
                    if let (Some(idf), Some(idg)) = (&id_field, &id_grad) {
                        // Reference: the same deposit kernel (same extents)
                        // applied at the identity image, so the kernel's own
                        // boundary spread cancels out of density estimates.
                        let mut y_id = [0.0; 3];
                        taylor_image(idf, idg, base, center, &mut y_id[..k]);
                        let _ = splat_deposit(grid_target, &y_id[..k], &ext[..k], vol, tol, &mut |node, share| {
                            ref_bins[node] += share;
                        });
                    }
                };
                for_each_subcell(grid, idx, subsamples, &mut visit);
                if let Some(e) = failure {
                    return Err(e);
                }
            }
            Ok((mass_bins, ref_bins))
        })
        .collect();
    let mut masses = vec![0.0; grid_target.node_count];
    let mut ref_volumes = vec![0.0; grid_target.node_count];
    for part in partials {
        let (m, r) = part?;
        for (a, b) in masses.iter_mut().zip(&m) {
            *a += b;
        }
        for (a, b) in ref_volumes.iter_mut().zip(&r) {
            *a += b;
        }
    }
    if !same_grid {
        // Different source and target geometry: reference volumes come from
        // routing the target's own sample set.
        ref_volumes = identity_reference(grid_target, subsamples);
    }
    let total_mass = crate::numeric::pairwise_sum(&masses);
    Ok(MeasureOnD { grid: grid_target.clone(), masses, ref_volumes, total_mass })
}

/// Reference volumes: the target grid's own sample set routed by position.
pub(crate) fn identity_reference(grid: &Arc<Grid>, subsamples: usize) -> Vec<f64> {
    let nodes = &grid.source_nodes;
    let nchunks = nodes.len().div_ceil(REDUCE_CHUNK);
    let partials: Vec<Vec<f64>> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(nodes.len());
            let mut bins = vec![0.0; grid.node_count];
            for &idx32 in &nodes[lo..hi] {
                let mut visit = |center: &[f64], step: &[f64], vol: f64| {
                    let d = grid.dim();
                    let mut ext = [0.0; 3];
                    for a in 0..d {
                        ext[a] = 0.5 * step[a];
                    }
                    let _ = splat_deposit(grid, center, &ext[..d], vol, grid.h, &mut |node, share| {
                        bins[node] += share;
                    });
                };
                for_each_subcell(grid, idx32 as usize, subsamples, &mut visit);
            }
            bins
        })
        .collect();
    let mut out = vec![0.0; grid.node_count];
    for part in partials {
        for (a, b) in out.iter_mut().zip(&part) {
            *a += b;
        }
    }
    out
}

/// CSV export of a measure: node coordinates, mass and density per row.
pub fn write_measure_csv(path: &std::path::Path, mu: &MeasureOnD) -> Result<()> {
    let grid = &mu.grid;
    let d = grid.dim();
    let mut out = String::new();
    for a in 0..d {
        out.push_str(&format!("y{a},"));
    }
    out.push_str("mass,density\n");
    for &idx32 in &grid.in_nodes {
        let idx = idx32 as usize;
        let p = grid.node_position(idx);
        for a in 0..d {
            out.push_str(&format!("{},", p[a]));
        }
        out.push_str(&format!("{},{}\n", mu.masses[idx], mu.density(idx)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Pushforward with the problem's target grid and subsample count.
pub fn pushforward_for(spec: &ProblemSpec, u: &Field) -> Result<MeasureOnD> {
    pushforward(u, &spec.grid_target, spec.subsamples)
}
