//! Discrete vector calculus on (possibly masked) lattices: second-order
//! central differences at interior nodes, second-order one-sided stencils at
//! boundary nodes, multilinear interpolation and the boundary flux quadrature.

use super::{Field, Grid, NodeClass, Rank};
use crate::error::{CoreError, Result};
use crate::numeric::pairwise_sum;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMode {
    Gradient,
    Divergence,
}

/// Stencil derivative along one axis with a caller-supplied accessor:
/// central where both neighbors exist, one-sided second order at boundaries,
/// degrading to first order where only one neighbor is available. The same
/// stencils serve plain fields and product-grid slices, keeping primal and
/// dual discretizations adjoint-consistent.
#[inline]
pub(crate) fn stencil_derivative<R: Fn(usize) -> f64>(
    grid: &Grid,
    node: usize,
    axis: usize,
    read: R,
) -> f64 {
    let h = grid.spacing[axis];
    let nb = |dir: isize| -> Option<usize> {
        grid.neighbor(node, axis, dir).filter(|&i| grid.is_in(i))
    };
    let (m1, p1) = (nb(-1), nb(1));
    match (m1, p1) {
        (Some(a), Some(b)) => (read(b) - read(a)) / (2.0 * h),
        (None, Some(b)) => {
            if let Some(b2) = grid.neighbor(node, axis, 2).filter(|&i| grid.is_in(i)) {
                (-3.0 * read(node) + 4.0 * read(b) - read(b2)) / (2.0 * h)
            } else {
                (read(b) - read(node)) / h
            }
        }
        (Some(a), None) => {
            if let Some(a2) = grid.neighbor(node, axis, -2).filter(|&i| grid.is_in(i)) {
                (3.0 * read(node) - 4.0 * read(a) + read(a2)) / (2.0 * h)
            } else {
                (read(node) - read(a)) / h
            }
        }
        (None, None) => 0.0,
    }
}

/// Derivative of one component along one axis at a node.
#[inline]
pub(crate) fn derivative_at(grid: &Grid, values: &[f64], stride: usize, comp: usize, node: usize, axis: usize) -> f64 {
    stencil_derivative(grid, node, axis, |idx| values[idx * stride + comp])
}

/// Discrete gradient or divergence.
///
/// gradient: scalar -> vector(d); vector(k) -> matrix(k x d).
/// divergence: vector(d) -> scalar.
pub fn differentiate(f: &Field, mode: DiffMode) -> Result<Field> {
    let grid = &f.grid;
    let d = grid.dim();
    match mode {
        DiffMode::Gradient => {
            let (k, out_rank) = match f.rank {
                Rank::Scalar => (1, Rank::Vector(d)),
                Rank::Vector(k) => (k, Rank::Matrix(k, d)),
                Rank::Matrix(..) => {
                    return Err(CoreError::RankMismatch {
                        op: "gradient",
                        expected: "scalar or vector",
                        got: f.rank.to_string(),
                    })
                }
            };
            let mut out = Field::zeros(grid.clone(), out_rank);
            let stride = f.components();
            let oc = out.components();
            let chunks: Vec<(usize, Vec<f64>)> = grid
                .in_nodes
                .par_chunks(crate::numeric::REDUCE_CHUNK)
                .enumerate()
                .map(|(ci, nodes)| {
                    let mut buf = vec![0.0; nodes.len() * oc];
                    for (li, &idx32) in nodes.iter().enumerate() {
                        let idx = idx32 as usize;
                        for c in 0..k {
                            for a in 0..d {
                                buf[li * oc + c * d + a] =
                                    derivative_at(grid, &f.values, stride, c, idx, a);
                            }
                        }
                    }
                    (ci, buf)
                })
                .collect();
            for (ci, buf) in chunks {
                let nodes =
                    &grid.in_nodes[ci * crate::numeric::REDUCE_CHUNK..][..buf.len() / oc];
                for (li, &idx32) in nodes.iter().enumerate() {
                    let idx = idx32 as usize;
                    out.values[idx * oc..(idx + 1) * oc]
                        .copy_from_slice(&buf[li * oc..(li + 1) * oc]);
                }
            }
            Ok(out)
        }
        DiffMode::Divergence => {
            let k = match f.rank {
                Rank::Vector(k) if k == d => k,
                _ => {
                    return Err(CoreError::RankMismatch {
                        op: "divergence",
                        expected: "vector matching the grid dimension",
                        got: f.rank.to_string(),
                    })
                }
            };
            let mut out = Field::zeros(grid.clone(), Rank::Scalar);
            let stride = f.components();
            let results: Vec<(u32, f64)> = grid
                .in_nodes
                .par_iter()
                .map(|&idx32| {
                    let idx = idx32 as usize;
                    let mut s = 0.0;
                    for a in 0..k {
                        s += derivative_at(grid, &f.values, stride, a, idx, a);
                    }
                    (idx32, s)
                })
                .collect();
            for (idx, v) in results {
                out.values[idx as usize] = v;
            }
            Ok(out)
        }
    }
}

/// Surface quadrature of v . n over the domain boundary.
///
/// `v` must be a vector field matching the grid dimension with finite values
/// at every boundary node.
pub fn boundary_flux(v: &Field, grid: &Grid) -> Result<f64> {
    let d = grid.dim();
    match v.rank {
        Rank::Vector(k) if k == d => {}
        _ => {
            return Err(CoreError::RankMismatch {
                op: "boundary_flux",
                expected: "vector matching the grid dimension",
                got: v.rank.to_string(),
            })
        }
    }
    for &b in &grid.boundary_nodes {
        let vals = v.node_slice(b as usize);
        if vals.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::MissingBoundaryValues(format!(
                "non-finite value at boundary node {b}"
            )));
        }
    }
    let terms: Vec<f64> = grid
        .surface
        .iter()
        .map(|e| {
            let vals = v.node_slice(e.node);
            let mut dot = 0.0;
            for a in 0..d {
                dot += vals[a] * e.normal[a];
            }
            e.weight * dot
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Multilinear interpolation of one component at an arbitrary point.
/// Corners falling on exterior nodes are dropped and the remaining weights
/// renormalized; the point is clamped to the bounding box.
pub fn interpolate(f: &Field, p: &[f64], comp: usize) -> f64 {
    let grid = &f.grid;
    let d = grid.dim();
    let c = f.components();
    let mut base = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..d {
        let x = (p[a] - grid.origin[a]) / grid.spacing[a];
        let cells = grid.resolution[a] as f64;
        let x = x.clamp(0.0, cells);
        let i = (x.floor() as usize).min(grid.resolution[a] - 1);
        base[a] = i;
        t[a] = x - i as f64;
    }
    let mut wsum = 0.0;
    let mut acc = 0.0;
    let corners = 1usize << d;
    for mask in 0..corners {
        let mut multi = [0usize; 3];
        let mut w = 1.0;
        for a in 0..d {
            if mask >> a & 1 == 1 {
                multi[a] = base[a] + 1;
                w *= t[a];
            } else {
                multi[a] = base[a];
                w *= 1.0 - t[a];
            }
        }
        if w == 0.0 {
            continue;
        }
        let idx = grid.node_index(&multi[..d]);
        if grid.class[idx] == NodeClass::Exterior {
            continue;
        }
        wsum += w;
        acc += w * f.values[idx * c + comp];
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        // All corners exterior: fall back to the nearest non-exterior node.
        let mut best = f64::INFINITY;
        let mut val = 0.0;
        for &idx32 in &grid.in_nodes {
            let q = grid.node_position(idx32 as usize);
            let mut dist = 0.0;
            for a in 0..d {
                dist += (q[a] - p[a]).powi(2);
            }
            if dist < best {
                best = dist;
                val = f.values[idx32 as usize * c + comp];
            }
        }
        val
    }
}

/// Interpolate all components at once.
pub fn interpolate_vector(f: &Field, p: &[f64], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = interpolate(f, p, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gradient_of_constant_vanishes() {
        let g = build_grid(&DomainSpec::unit_square(), 16).unwrap();
        let f = Field::scalar_from_fn(g.clone(), |_| 3.25);
        let grad = differentiate(&f, DiffMode::Gradient).unwrap();
        assert!(grad.max_abs() < 1e-13);
    }

    #[test]
    fn gradient_of_linear_is_exact() {
        let spec = DomainSpec::interval(0.0, 1.0).unwrap();
        let g = build_grid(&spec, 8).unwrap();
        let f = Field::scalar_from_fn(g.clone(), |p| p[0]);
        let grad = differentiate(&f, DiffMode::Gradient).unwrap();
        for &idx in &g.in_nodes {
            assert_abs_diff_eq!(grad.value(idx as usize, 0), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn laplacian_of_quadratic_is_exact() {
        let g = build_grid(&DomainSpec::unit_square(), 64).unwrap();
        let f = Field::scalar_from_fn(g.clone(), |p| p[0] * p[0] + p[1] * p[1]);
        let grad = differentiate(&f, DiffMode::Gradient).unwrap();
        let lap = differentiate(&grad, DiffMode::Divergence).unwrap();
        let mut max_err = 0.0f64;
        for &idx in &g.in_nodes {
            max_err = max_err.max((lap.value(idx as usize, 0) - 4.0).abs());
        }
        assert!(max_err <= 1e-10, "max node error {max_err}");
    }

    #[test]
    fn rank_mismatch_rejected() {
        let g = build_grid(&DomainSpec::unit_square(), 8).unwrap();
        let f = Field::scalar_from_fn(g.clone(), |p| p[0]);
        assert!(matches!(
            differentiate(&f, DiffMode::Divergence),
            Err(CoreError::RankMismatch { .. })
        ));
        let m = Field::zeros(g, Rank::Matrix(2, 2));
        assert!(differentiate(&m, DiffMode::Gradient).is_err());
    }

    #[test]
    fn flux_of_identity_field_is_d_times_volume() {
        let g = build_grid(&DomainSpec::unit_square(), 32).unwrap();
        let v = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
            out[0] = p[0];
            out[1] = p[1];
        });
        let flux = boundary_flux(&v, &g).unwrap();
        assert!((flux - 2.0).abs() < 0.02, "flux {flux}");

        let gd = build_grid(&DomainSpec::unit_disk(), 64).unwrap();
        let vd = Field::from_fn(gd.clone(), Rank::Vector(2), |p, out| {
            out[0] = p[0];
            out[1] = p[1];
        });
        let fluxd = boundary_flux(&vd, &gd).unwrap();
        let exact = 2.0 * std::f64::consts::PI;
        assert!((fluxd - exact).abs() / exact < 0.05, "disk flux {fluxd} vs {exact}");
    }

    #[test]
    fn flux_of_zero_field_is_zero() {
        let g = build_grid(&DomainSpec::unit_square(), 8).unwrap();
        let v = Field::zeros(g.clone(), Rank::Vector(2));
        assert_abs_diff_eq!(boundary_flux(&v, &g).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn divergence_theorem_on_smooth_field() {
        // |sum of div over cells - boundary flux| <= C h for a C^1 field
        for n in [16usize, 32] {
            let g = build_grid(&DomainSpec::unit_square(), n).unwrap();
            let v = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
                out[0] = (p[0] * 2.1).sin() * (p[1] * 0.7).cos();
                out[1] = p[0] * p[1] + (p[1] * 1.3).cos();
            });
            let div = differentiate(&v, DiffMode::Divergence).unwrap();
            let interior: f64 = g
                .in_nodes
                .iter()
                .map(|&i| div.value(i as usize, 0) * g.volumes[i as usize])
                .sum();
            let flux = boundary_flux(&v, &g).unwrap();
            assert!(
                (interior - flux).abs() <= 2.0 * g.h,
                "n={n}: interior {interior} flux {flux}"
            );
        }
    }

    #[test]
    fn interpolation_reproduces_linear_functions() {
        let g = build_grid(&DomainSpec::unit_square(), 8).unwrap();
        let f = Field::scalar_from_fn(g.clone(), |p| 2.0 * p[0] - 3.0 * p[1] + 0.5);
        for (x, y) in [(0.13, 0.77), (0.5, 0.5), (0.99, 0.01)] {
            let v = interpolate(&f, &[x, y], 0);
            assert_abs_diff_eq!(v, 2.0 * x - 3.0 * y + 0.5, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn differentiate_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let g = build_grid(&DomainSpec::unit_square(), 12).unwrap();
            let f1 = Field::scalar_from_fn(g.clone(), |p| (p[0] * 3.0).sin() + p[1]);
            let f2 = Field::scalar_from_fn(g.clone(), |p| p[0] * p[1]);
            let mut comb = f1.clone();
            comb.scale(alpha);
            comb.axpy(beta, &f2);
            let lhs = differentiate(&comb, DiffMode::Gradient).unwrap();
            let mut rhs = differentiate(&f1, DiffMode::Gradient).unwrap();
            rhs.scale(alpha);
            rhs.axpy(beta, &differentiate(&f2, DiffMode::Gradient).unwrap());
            let mut max_err = 0.0f64;
            for (a, b) in lhs.values.iter().zip(&rhs.values) {
                max_err = max_err.max((a - b).abs());
            }
            prop_assert!(max_err < 1e-10);
        }
    }
}
