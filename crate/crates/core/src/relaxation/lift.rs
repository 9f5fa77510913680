//! Lift of a deformation into the plan/flux space: each subcell carries its
//! volume into the target cell of its image together with the local gradient
//! as flux, using the same box-overlap splatting as the pushforward.

use super::{PlanFlux, PlanStorage, ProductGrid};
use crate::domain::{differentiate, route_to_in_node, DiffMode, Field, NodeClass, Rank};
use crate::energy::measure_internals::{
    for_each_subcell, image_extents, splat_deposit, taylor_image,
};
use crate::energy::{MeasureOnD, ProblemSpec};
use crate::error::{CoreError, Result};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Lift u to an admissible triple: the omega marginal equals the sampled
/// source volumes exactly, mu is the target marginal, and the flux of each
/// cell accumulates subcell volume times the local discrete gradient.
pub fn lift(u: &Field, spec: &ProblemSpec) -> Result<PlanFlux> {
    let product = ProductGrid::for_spec(spec);
    lift_onto(u, spec, &product)
}

pub fn lift_onto(u: &Field, spec: &ProblemSpec, product: &Arc<ProductGrid>) -> Result<PlanFlux> {
    let grid = &spec.grid_omega;
    let grid_d = &spec.grid_target;
    let k = grid_d.dim();
    match u.rank {
        Rank::Vector(kk) if kk == k => {}
        _ => {
            return Err(CoreError::RankMismatch {
                op: "lift",
                expected: "vector matching the target dimension",
                got: u.rank.to_string(),
            })
        }
    }
    u.validate()?;
    let dev = spec.boundary_deviation(u);
    if dev > grid.h {
        return Err(CoreError::BoundaryMismatch { max_dev: dev, tol: grid.h });
    }
    let grad = differentiate(u, DiffMode::Gradient)?;
    let kd = k * grid.dim();
    let tol = grid_d.h;

    // per omega-cell accumulation keyed by target slot
    let mut a_idx: Vec<u32> = Vec::new();
    let mut b_idx: Vec<u32> = Vec::new();
    let mut mass: Vec<f64> = Vec::new();
    let mut flux: Vec<f64> = Vec::new();
    let mut omega_ref = vec![0.0; product.omega_active.len()];
    let mut mu_mass = vec![0.0; grid_d.node_count];

    let mut row: BTreeMap<(u32, u32), (f64, Vec<f64>)> = BTreeMap::new();
    for &src32 in &grid.source_nodes {
        let src = src32 as usize;
        let anchored = grid.class[src] != NodeClass::Exterior;
        row.clear();
        let mut failure = None;
        let mut visit = |center: &[f64], step: &[f64], vol: f64| {
            if failure.is_some() {
                return;
            }
            // exterior slivers are attributed to the omega cell of the
            // nearest-in-node partition, same as the grid's volume routing
            let base = if anchored { Some(src) } else { route_to_in_node(grid, center) };
            let Some(base) = base else { return };
            let a_slot = match product.omega_slot_of(base) {
                Some(s) => s as u32,
                None => return,
            };
            omega_ref[a_slot as usize] += vol;
            let mut y = [0.0; 3];
            let mut ext = [0.0; 3];
            taylor_image(u, &grad, base, center, &mut y[..k]);
            image_extents(&grad, base, step, &mut ext[..k]);
            let g = grad.node_slice(base);
            let res = splat_deposit(grid_d, &y[..k], &ext[..k], vol, tol, &mut |node, share| {
                mu_mass[node] += share;
                if let Some(b_slot) = product.target_slot_of(node) {
                    let entry = row
                        .entry((a_slot, b_slot as u32))
                        .or_insert_with(|| (0.0, vec![0.0; kd]));
                    entry.0 += share;
                    for (fj, gj) in entry.1.iter_mut().zip(g) {
                        *fj += share * gj;
                    }
                }
            });
            if let Err(e) = res {
                failure = Some(e);
            }
        };
        for_each_subcell(grid, src, spec.subsamples, &mut visit);
        if let Some(e) = failure {
            return Err(e);
        }
        for ((a_slot, b_slot), (m, fl)) in std::mem::take(&mut row) {
            a_idx.push(a_slot);
            b_idx.push(b_slot);
            mass.push(m);
            flux.extend_from_slice(&fl);
        }
    }

    // merge duplicate (a, b) pairs, sorted
    let mut order: Vec<usize> = (0..a_idx.len()).collect();
    order.sort_by_key(|&e| (a_idx[e], b_idx[e]));
    let mut sa = Vec::with_capacity(order.len());
    let mut sb = Vec::with_capacity(order.len());
    let mut sm = Vec::with_capacity(order.len());
    let mut sf: Vec<f64> = Vec::with_capacity(order.len() * kd);
    for &e in &order {
        let same = sa.last() == Some(&a_idx[e]) && sb.last() == Some(&b_idx[e]);
        if same {
            let last = sm.len() - 1;
            sm[last] += mass[e];
            let off = last * kd;
            for j in 0..kd {
                sf[off + j] += flux[e * kd + j];
            }
        } else {
            sa.push(a_idx[e]);
            sb.push(b_idx[e]);
            sm.push(mass[e]);
            sf.extend_from_slice(&flux[e * kd..(e + 1) * kd]);
        }
    }

    let ref_volumes = super::energy::target_reference(spec);
    let total_mass = crate::numeric::pairwise_sum(&mu_mass);
    let mu = MeasureOnD {
        grid: grid_d.clone(),
        masses: mu_mass,
        ref_volumes,
        total_mass,
    };
    Ok(PlanFlux {
        product: product.clone(),
        storage: PlanStorage::Sparse { a: sa, b: sb, mass: sm, flux: sf },
        omega_ref,
        mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec};
    use crate::energy::{ImagePenalty, PotentialSpec, StoredEnergySpec};

    fn identity_spec(n: usize) -> (ProblemSpec, Field) {
        let g = build_grid(&DomainSpec::unit_square(), n).unwrap();
        let u = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
            out.copy_from_slice(&p[..2])
        });
        let spec = ProblemSpec::new(
            g.clone(),
            g,
            ProblemSpec::boundary_from_field(&u),
            StoredEnergySpec::Quadratic,
            PotentialSpec::Zero,
            ImagePenalty::incompressible(0.05).unwrap(),
            2,
        )
        .unwrap();
        (spec, u)
    }

    #[test]
    fn identity_lift_is_diagonal() {
        let (spec, u) = identity_spec(8);
        let pf = lift(&u, &spec).unwrap();
        pf.validate().unwrap();
        // support on the diagonal cells only
        pf.for_each_cell(|a, b, m, _| {
            if m > 1e-14 {
                assert_eq!(a, b, "off-diagonal mass {m} at ({a},{b})");
            }
        });
        assert!(pf.mu.max_uniform_deviation() < 1e-12);
    }

    #[test]
    fn omega_marginal_matches_reference_exactly() {
        let (spec, _) = identity_spec(12);
        let g = spec.grid_omega.clone();
        let u = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
            out[0] = p[0] + 0.05 * (std::f64::consts::PI * p[0]).sin() * (std::f64::consts::PI * p[1]).sin();
            out[1] = p[1];
        });
        let pf = lift(&u, &spec).unwrap();
        assert!(pf.omega_marginal_error() <= 1e-12, "marginal error {}", pf.omega_marginal_error());
    }
}
