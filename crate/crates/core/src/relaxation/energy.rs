//! Relaxed primal and dual energies, the dual feasibility margin and the
//! duality gap with an explicit discretization-slack estimate.

use super::{DualTriple, PhiField, PlanFlux, ProductGrid};
use crate::domain::{stencil_derivative, Field, Grid};
use crate::energy::measure_internals::identity_reference;
use crate::energy::{eval_phi, phi_h_conjugate, phi_h_value, phi_star, ImagePenalty, ProblemSpec};
use crate::error::{CoreError, Result};
use crate::numeric::{pairwise_sum, par_min_indexed};
use std::sync::Arc;

/// Pairs cap for the exact feasibility sweep; beyond it the target side is
/// strided (the margin becomes a deterministic subsample estimate).
const MARGIN_PAIR_CAP: usize = 200_000_000;

pub(crate) fn target_reference(spec: &ProblemSpec) -> Vec<f64> {
    identity_reference(&spec.grid_target, spec.subsamples)
}

/// Perspective transport term of one cell: W(J/pi) pi, with 0/0 = 0 and
/// +inf when mass vanishes but flux does not.
fn perspective_cell(spec: &ProblemSpec, mass: f64, flux: &[f64]) -> f64 {
    let flux_norm_sq: f64 = flux.iter().map(|x| x * x).sum();
    if mass <= 0.0 {
        if flux_norm_sq <= 1e-28 {
            return 0.0;
        }
        return f64::INFINITY;
    }
    match spec.stored_energy {
        crate::energy::StoredEnergySpec::Quadratic => 0.5 * flux_norm_sq / mass,
        _ => {
            let scaled: Vec<f64> = flux.iter().map(|x| x / mass).collect();
            spec.stored_energy.value(&scaled) * mass
        }
    }
}

/// Relaxed energy: perspective transport plus potential against the plan,
/// plus the penalty at the target marginal. +inf is a value, not an error.
pub fn relaxed_energy(pf: &PlanFlux, spec: &ProblemSpec) -> Result<f64> {
    pf.validate()?;
    let product = &pf.product;
    let grid = &product.omega;
    let grid_d = &product.target;
    let d = grid.dim();
    let k = grid_d.dim();
    let mut terms: Vec<f64> = Vec::new();
    let mut infinite = false;
    pf.for_each_cell(|a, b, mass, flux| {
        let w = perspective_cell(spec, mass, flux);
        if w.is_infinite() {
            infinite = true;
            return;
        }
        let x = grid.node_position(product.omega_active[a] as usize);
        let y = grid_d.node_position(product.target_active[b] as usize);
        let f = spec.potential.value(&x[..d], &y[..k]);
        terms.push(w + f * mass);
    });
    if infinite {
        return Ok(f64::INFINITY);
    }
    let bulk = pairwise_sum(&terms);
    Ok(bulk + eval_phi(&pf.mu, &spec.penalty))
}

/// phi components at (omega lattice node, target point). For dense storage
/// the target point must be an active node; competitor storage evaluates the
/// closed form, shifting u to `position` when one is supplied.
fn phi_at(
    dt: &DualTriple,
    a_lattice: usize,
    y: &[f64],
    position: Option<&[f64]>,
    out: &mut [f64],
) {
    let product = &dt.product;
    let d = product.omega.dim();
    let k = product.target.dim();
    match &dt.phi {
        PhiField::Dense { values } => {
            // multilinear in y over the active target lattice
            let a_slot = product
                .omega_slot_of(a_lattice)
                .expect("phi evaluation at an active omega node");
            let nb = product.target_active.len();
            let grid_d = &product.target;
            for (i, o) in out.iter_mut().enumerate().take(d) {
                // gather the i-th component as a scalar function of y
                let read = |lattice: usize| -> f64 {
                    match product.target_slot_of(lattice) {
                        Some(b) => values[(a_slot * nb + b) * d + i],
                        None => 0.0,
                    }
                };
                *o = interp_target(grid_d, y, &read);
            }
        }
        PhiField::Competitor(data) => {
            let b = data.b_field.node_slice(a_lattice);
            let w = data.w.node_slice(a_lattice);
            let mut u = [0.0; 3];
            u[..k].copy_from_slice(data.u.node_slice(a_lattice));
            if let Some(pos) = position {
                // first-order shift of u to the evaluation position
                let g = data.grad_u.node_slice(a_lattice);
                let node = product.omega.node_position(a_lattice);
                for c in 0..k {
                    for ax in 0..d {
                        u[c] += g[c * d + ax] * (pos[ax] - node[ax]);
                    }
                }
            }
            let dist_sq: f64 = (0..k).map(|c| (u[c] - y[c]).powi(2)).sum();
            for (i, o) in out.iter_mut().enumerate().take(d) {
                let mut v = 0.5 * dist_sq * w[i];
                for c in 0..k {
                    v += y[c] * b[c * d + i];
                }
                *o = v;
            }
        }
    }
}

/// Multilinear interpolation of a target-lattice scalar accessor.
fn interp_target<R: Fn(usize) -> f64>(grid: &Grid, y: &[f64], read: &R) -> f64 {
    let k = grid.dim();
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..k {
        let x = ((y[a] - grid.origin[a]) / grid.spacing[a]).clamp(0.0, grid.resolution[a] as f64);
        let i = (x.floor() as usize).min(grid.resolution[a] - 1);
        base[a] = i;
        t[a] = x - i as f64;
    }
    let corners = 1usize << k;
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for mask in 0..corners {
        let mut multi = [0usize; 3];
        let mut w = 1.0;
        for a in 0..k {
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
        let idx = grid.node_index(&multi[..k]);
        if !grid.is_in(idx) {
            continue;
        }
        acc += w * read(idx);
        wsum += w;
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        0.0
    }
}

/// Discrete divergence of phi over the omega axes at a product cell.
fn phi_omega_divergence(dt: &DualTriple, a_slot: usize, b_slot: usize) -> f64 {
    let product = &dt.product;
    let grid = &product.omega;
    let d = grid.dim();
    let k = product.target.dim();
    let a_lattice = product.omega_active[a_slot] as usize;
    match &dt.phi {
        PhiField::Dense { values } => {
            let nb = product.target_active.len();
            let mut div = 0.0;
            for i in 0..d {
                div += stencil_derivative(grid, a_lattice, i, |lattice| {
                    match product.omega_slot_of(lattice) {
                        Some(s) => values[(s * nb + b_slot) * d + i],
                        None => 0.0,
                    }
                });
            }
            div
        }
        PhiField::Competitor(data) => {
            let y3 = product.target.node_position(product.target_active[b_slot] as usize);
            let y = &y3[..k];
            let u = data.u.node_slice(a_lattice);
            let w = data.w.node_slice(a_lattice);
            let g = data.grad_u.node_slice(a_lattice);
            let row_div = data.b_row_div.node_slice(a_lattice);
            let dist_sq: f64 = (0..k).map(|c| (u[c] - y[c]).powi(2)).sum();
            let mut div = 0.5 * dist_sq * data.div_w.values[a_lattice];
            for c in 0..k {
                div += y[c] * row_div[c];
                // (u - y)^T grad_u w
                let mut gw = 0.0;
                for i in 0..d {
                    gw += g[c * d + i] * w[i];
                }
                div += (u[c] - y[c]) * gw;
            }
            div
        }
    }
}

/// Derivative of phi with respect to the target variable, k x d layout
/// matching deformation gradients.
fn phi_target_gradient(dt: &DualTriple, a_slot: usize, b_slot: usize, out: &mut [f64]) {
    let product = &dt.product;
    let grid_d = &product.target;
    let d = product.omega.dim();
    let k = grid_d.dim();
    let b_lattice = product.target_active[b_slot] as usize;
    match &dt.phi {
        PhiField::Dense { values } => {
            let nb = product.target_active.len();
            for c in 0..k {
                for i in 0..d {
                    out[c * d + i] = stencil_derivative(grid_d, b_lattice, c, |lattice| {
                        match product.target_slot_of(lattice) {
                            Some(s) => values[(a_slot * nb + s) * d + i],
                            None => 0.0,
                        }
                    });
                }
            }
        }
        PhiField::Competitor(data) => {
            let a_lattice = product.omega_active[a_slot] as usize;
            let y3 = grid_d.node_position(b_lattice);
            let b = data.b_field.node_slice(a_lattice);
            let u = data.u.node_slice(a_lattice);
            let w = data.w.node_slice(a_lattice);
            for c in 0..k {
                for i in 0..d {
                    out[c * d + i] = b[c * d + i] - (u[c] - y3[c]) * w[i];
                }
            }
        }
    }
}

/// Constraint slack at one product cell.
fn slack_at(dt: &DualTriple, spec: &ProblemSpec, a_slot: usize, b_slot: usize) -> f64 {
    let product = &dt.product;
    let d = product.omega.dim();
    let k = product.target.dim();
    let a_lattice = product.omega_active[a_slot] as usize;
    let b_lattice = product.target_active[b_slot] as usize;
    let x = product.omega.node_position(a_lattice);
    let y = product.target.node_position(b_lattice);
    let mut grad = [0.0; 9];
    phi_target_gradient(dt, a_slot, b_slot, &mut grad[..k * d]);
    let wstar = spec.stored_energy.conjugate(&grad[..k * d]);
    let div = phi_omega_divergence(dt, a_slot, b_slot);
    dt.psi.values[a_lattice] + dt.omega.values[b_lattice] + spec.potential.value(&x[..d], &y[..k])
        - div
        - wstar
}

/// Minimum constraint slack over the product cells. Above the pair cap the
/// target side is strided deterministically and the result is an estimate.
pub fn dual_feasibility_margin(dt: &DualTriple, spec: &ProblemSpec) -> f64 {
    let product = &dt.product;
    let na = product.omega_active.len();
    let nb = product.target_active.len();
    let stride = (na * nb).div_ceil(MARGIN_PAIR_CAP).max(1);
    par_min_indexed(na, |a_slot| {
        let mut local = f64::INFINITY;
        let mut b_slot = a_slot % stride;
        while b_slot < nb {
            local = local.min(slack_at(dt, spec, a_slot, b_slot));
            b_slot += stride;
        }
        local
    })
}

/// Relaxed dual energy: boundary pairing of phi with the boundary map minus
/// the psi integral minus the penalty conjugate. Returns -inf when the
/// conjugate is unbounded.
pub fn dual_energy(dt: &DualTriple, spec: &ProblemSpec) -> Result<f64> {
    let product = &dt.product;
    let grid = &product.omega;
    let d = grid.dim();
    let k = product.target.dim();
    let boundary = boundary_term(dt, spec)?;
    let _ = (d, k);
    let psi_terms: Vec<f64> = grid
        .in_nodes
        .iter()
        .map(|&i| dt.psi.values[i as usize] * grid.volumes[i as usize])
        .collect();
    let psi_int = pairwise_sum(&psi_terms);
    let star = phi_star(&dt.omega, &spec.penalty)?;
    if star.unbounded {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(boundary - psi_int - star.value)
}

/// Surface pairing of x -> phi(x, g(x)) with the outward normal.
fn boundary_term(dt: &DualTriple, spec: &ProblemSpec) -> Result<f64> {
    let product = &dt.product;
    let grid = &product.omega;
    let d = grid.dim();
    let k = product.target.dim();
    let terms: Vec<f64> = grid
        .surface
        .iter()
        .map(|e| {
            let g = spec
                .boundary_value(e.node)
                .expect("surface element node carries a boundary value");
            let mut phi = [0.0; 3];
            phi_at(dt, e.node, &g[..k], Some(&e.position[..d]), &mut phi[..d]);
            let mut dot = 0.0;
            for i in 0..d {
                dot += phi[i] * e.normal[i];
            }
            e.weight * dot
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

#[derive(Debug, Clone)]
pub struct DualityGapReport {
    pub relaxed: f64,
    pub dual: f64,
    pub gap: f64,
    /// |continuity pairing of the dual phi against the plan|.
    pub continuity_pairing: f64,
    /// Marginal and penalty quadrature mismatches the gap bound absorbs.
    pub marginal_slack: f64,
    pub penalty_slack: f64,
    /// Total discretization slack: the weak-duality bound is
    /// gap >= -slack up to roundoff.
    pub slack: f64,
    pub primal_admissible: bool,
    pub dual_admissible: bool,
}

/// Weak-duality audit of a primal/dual pair: the gap together with the
/// discretization slack that bounds it from below.
pub fn duality_gap(pf: &PlanFlux, dt: &DualTriple, spec: &ProblemSpec) -> Result<DualityGapReport> {
    let relaxed = relaxed_energy(pf, spec)?;
    let dual = dual_energy(dt, spec)?;
    let gap = relaxed - dual;
    let product = &pf.product;
    let grid = &product.omega;
    let grid_d = &product.target;
    let kd = product.kd();

    // continuity pairing of this dual phi against the plan, with the same
    // discrete derivatives the feasibility margin uses
    let mut pairing_terms: Vec<f64> = Vec::new();
    pf.for_each_cell(|a, b, mass, flux| {
        let div = phi_omega_divergence(dt, a, b);
        let mut grad = [0.0; 9];
        phi_target_gradient(dt, a, b, &mut grad[..kd]);
        let contraction: f64 = grad[..kd].iter().zip(flux).map(|(g, j)| g * j).sum();
        pairing_terms.push(div * mass + contraction);
    });
    let pairing = pairwise_sum(&pairing_terms) - boundary_term(dt, spec)?;
    let continuity_pairing = pairing.abs();

    // psi against the gap between grid volumes and the plan's marginal
    let marg = pf.omega_marginal();
    let mut marginal_slack = 0.0;
    for (s, &lattice) in product.omega_active.iter().enumerate() {
        marginal_slack +=
            (grid.volumes[lattice as usize] - marg[s]).abs() * dt.psi.values[lattice as usize].abs();
    }
    // penalty quadrature mismatch
    let penalty_slack = match &spec.penalty {
        ImagePenalty::Incompressible { .. } => {
            let mut s = 0.0;
            for &lattice in &product.target_active {
                let l = lattice as usize;
                s += (grid_d.volumes[l] - pf.mu.masses[l]) * dt.omega.values[l];
            }
            s.abs()
        }
        ImagePenalty::IntegralH { h } => {
            let mut s = 0.0;
            for &lattice in &product.target_active {
                let l = lattice as usize;
                let conj = phi_h_conjugate(*h, dt.omega.values[l]);
                if conj.is_finite() {
                    s += (grid_d.volumes[l] - pf.mu.ref_volumes[l]).abs() * conj.abs();
                }
            }
            s + 1e-9
        }
    };
    let slack = continuity_pairing + marginal_slack + penalty_slack;
    Ok(DualityGapReport {
        relaxed,
        dual,
        gap,
        continuity_pairing,
        marginal_slack,
        penalty_slack,
        slack,
        primal_admissible: pf.omega_marginal_error() <= 1e-6,
        dual_admissible: dt.is_admissible(),
    })
}

#[derive(Debug, Clone)]
pub struct EqualityDiagnostics {
    /// sup over the plan support of |grad_D phi - DW(J/pi)|.
    pub gradient_match: f64,
    /// sup over the plan support of the constraint slack.
    pub support_slack: f64,
    /// Fenchel-Young slack of the penalty at (mu, omega).
    pub penalty_fenchel_slack: f64,
}

/// The three equality conditions of zero duality gap, evaluated on the
/// support of the plan.
pub fn equality_diagnostics(
    pf: &PlanFlux,
    dt: &DualTriple,
    spec: &ProblemSpec,
) -> Result<EqualityDiagnostics> {
    let product = &pf.product;
    let kd = product.kd();
    let mut max_mass = 0.0f64;
    pf.for_each_cell(|_, _, m, _| max_mass = max_mass.max(m));
    let threshold = 1e-6 * max_mass;
    let mut gradient_match = 0.0f64;
    let mut support_slack = 0.0f64;
    pf.for_each_cell(|a, b, mass, flux| {
        if mass <= threshold {
            return;
        }
        let mut grad = [0.0; 9];
        phi_target_gradient(dt, a, b, &mut grad[..kd]);
        let scaled: Vec<f64> = flux.iter().map(|x| x / mass).collect();
        let mut dw = vec![0.0; kd];
        spec.stored_energy.derivative(&scaled, &mut dw);
        let diff: f64 = grad[..kd]
            .iter()
            .zip(&dw)
            .map(|(g, d)| (g - d) * (g - d))
            .sum::<f64>()
            .sqrt();
        gradient_match = gradient_match.max(diff);
        support_slack = support_slack.max(slack_at(dt, spec, a, b).abs());
    });
    let penalty_fenchel_slack = match &spec.penalty {
        ImagePenalty::Incompressible { .. } => {
            let grid_d = &product.target;
            let mut s = 0.0;
            for &lattice in &product.target_active {
                let l = lattice as usize;
                s += dt.omega.values[l] * (grid_d.volumes[l] - pf.mu.masses[l]);
            }
            s.abs()
        }
        ImagePenalty::IntegralH { h } => {
            let mut worst = 0.0f64;
            for &lattice in &product.target_active {
                let l = lattice as usize;
                let r = pf.mu.ref_volumes[l];
                if r <= 0.0 {
                    continue;
                }
                let dens = pf.mu.masses[l] / r;
                if dens <= 0.0 {
                    continue;
                }
                let omega = dt.omega.values[l];
                let conj = phi_h_conjugate(*h, omega);
                if conj.is_finite() {
                    worst = worst.max((phi_h_value(*h, dens) + conj - omega * dens).abs());
                }
            }
            worst
        }
    };
    Ok(EqualityDiagnostics { gradient_match, support_slack, penalty_fenchel_slack })
}

/// Extend ProblemSpec with a boundary-value lookup by lattice node.
impl ProblemSpec {
    pub fn boundary_value(&self, lattice_node: usize) -> Option<&[f64]> {
        let k = self.grid_target.dim();
        let pos = self
            .grid_omega
            .boundary_nodes
            .binary_search(&(lattice_node as u32))
            .ok()?;
        Some(&self.boundary_map[pos * k..(pos + 1) * k])
    }
}

/// Zero dual triple on the product of the problem grids.
pub fn zero_dual(spec: &ProblemSpec) -> DualTriple {
    let product = ProductGrid::for_spec(spec);
    zero_dual_on(spec, &product)
}

pub fn zero_dual_on(spec: &ProblemSpec, product: &Arc<ProductGrid>) -> DualTriple {
    let d = product.omega.dim();
    let values = vec![0.0; product.cells() * d];
    let mut dt = DualTriple {
        product: product.clone(),
        phi: PhiField::Dense { values },
        psi: Field::zeros(product.omega.clone(), crate::domain::Rank::Scalar),
        omega: Field::zeros(product.target.clone(), crate::domain::Rank::Scalar),
        feasibility_margin: 0.0,
        feas_tol: super::default_feas_tol(&product.omega),
        epsilon: None,
    };
    dt.feasibility_margin = dual_feasibility_margin(&dt, spec);
    dt
}
