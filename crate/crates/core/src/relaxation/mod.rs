//! Convex relaxation on plan/flux triples over the product of the reference
//! and target grids: lifting of deformations, the generalized continuity
//! equation, relaxed primal and dual energies, dual-competitor construction,
//! weak-duality audits and a primal-dual solver.

mod audit;
mod competitor;
mod energy;
mod lift;
mod residual;
mod solver;

pub use audit::{audit_weak_duality, GapSample};
pub use competitor::build_dual_competitor;
pub use energy::{
    dual_energy, dual_feasibility_margin, duality_gap, equality_diagnostics, relaxed_energy,
    DualityGapReport, EqualityDiagnostics,
};
pub use lift::lift;
pub use residual::continuity_residual;
pub use solver::{solve_relaxation, SolverOptions, SolverResult, TraceRow};

use crate::domain::{Field, Grid};
use crate::energy::{MeasureOnD, ProblemSpec};
use crate::error::{CoreError, Result};
use std::sync::Arc;

/// Indexing of the product of the two grids' non-exterior nodes.
#[derive(Debug)]
pub struct ProductGrid {
    pub omega: Arc<Grid>,
    pub target: Arc<Grid>,
    /// Active lattice nodes (the grids' in-node lists).
    pub omega_active: Vec<u32>,
    pub target_active: Vec<u32>,
    omega_slot: Vec<u32>,
    target_slot: Vec<u32>,
}

impl ProductGrid {
    pub fn new(omega: Arc<Grid>, target: Arc<Grid>) -> Arc<Self> {
        let mut omega_slot = vec![u32::MAX; omega.node_count];
        for (s, &idx) in omega.in_nodes.iter().enumerate() {
            omega_slot[idx as usize] = s as u32;
        }
        let mut target_slot = vec![u32::MAX; target.node_count];
        for (s, &idx) in target.in_nodes.iter().enumerate() {
            target_slot[idx as usize] = s as u32;
        }
        Arc::new(ProductGrid {
            omega_active: omega.in_nodes.clone(),
            target_active: target.in_nodes.clone(),
            omega,
            target,
            omega_slot,
            target_slot,
        })
    }

    pub fn for_spec(spec: &ProblemSpec) -> Arc<Self> {
        Self::new(spec.grid_omega.clone(), spec.grid_target.clone())
    }

    pub fn cells(&self) -> usize {
        self.omega_active.len() * self.target_active.len()
    }

    /// Flux components per cell.
    pub fn kd(&self) -> usize {
        self.target.dim() * self.omega.dim()
    }

    #[inline]
    pub fn omega_slot_of(&self, lattice: usize) -> Option<usize> {
        let s = self.omega_slot[lattice];
        (s != u32::MAX).then_some(s as usize)
    }

    #[inline]
    pub fn target_slot_of(&self, lattice: usize) -> Option<usize> {
        let s = self.target_slot[lattice];
        (s != u32::MAX).then_some(s as usize)
    }
}

/// Plan and flux storage: sparse after lifting, dense for the solver.
#[derive(Debug, Clone)]
pub enum PlanStorage {
    /// Entries sorted by (omega slot, target slot); flux flat with kd
    /// components per entry.
    Sparse { a: Vec<u32>, b: Vec<u32>, mass: Vec<f64>, flux: Vec<f64> },
    /// Row-major [omega slot][target slot]; flux with kd components.
    Dense { pi: Vec<f64>, flux: Vec<f64> },
}

/// Relaxed primal triple: plan masses, flux matrices and the target marginal.
#[derive(Debug, Clone)]
pub struct PlanFlux {
    pub product: Arc<ProductGrid>,
    pub storage: PlanStorage,
    /// Source-volume reference per active omega node (the plan's
    /// omega-marginal in the exact construction).
    pub omega_ref: Vec<f64>,
    /// Target marginal (mu is defined as the marginal of the plan).
    pub mu: MeasureOnD,
}

impl PlanFlux {
    /// Iterate cells with positive data: f(omega_slot, target_slot, mass, flux).
    pub fn for_each_cell<F: FnMut(usize, usize, f64, &[f64])>(&self, mut f: F) {
        let kd = self.product.kd();
        match &self.storage {
            PlanStorage::Sparse { a, b, mass, flux } => {
                for e in 0..a.len() {
                    f(a[e] as usize, b[e] as usize, mass[e], &flux[e * kd..(e + 1) * kd]);
                }
            }
            PlanStorage::Dense { pi, flux } => {
                let nb = self.product.target_active.len();
                for (cell, &m) in pi.iter().enumerate() {
                    let fl = &flux[cell * kd..(cell + 1) * kd];
                    if m != 0.0 || fl.iter().any(|&x| x != 0.0) {
                        f(cell / nb, cell % nb, m, fl);
                    }
                }
            }
        }
    }

    /// Omega marginal per active node.
    pub fn omega_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.product.omega_active.len()];
        self.for_each_cell(|a, _, m, _| out[a] += m);
        out
    }

    /// Max relative deviation of the omega marginal from the reference.
    pub fn omega_marginal_error(&self) -> f64 {
        let marg = self.omega_marginal();
        let mut worst = 0.0f64;
        for (s, &m) in marg.iter().enumerate() {
            let r = self.omega_ref[s];
            if r > 0.0 {
                worst = worst.max((m - r).abs() / r);
            } else {
                worst = worst.max(m.abs());
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        let mut ok = true;
        self.for_each_cell(|_, _, m, fl| {
            if m < 0.0 || !m.is_finite() || fl.iter().any(|x| !x.is_finite()) {
                ok = false;
            }
        });
        if !ok {
            return Err(CoreError::InvalidField(
                "plan carries negative mass or non-finite flux".into(),
            ));
        }
        // mu is the target marginal
        let mut marg = vec![0.0; self.product.target_active.len()];
        self.for_each_cell(|_, b, m, _| marg[b] += m);
        for (s, &idx) in self.product.target_active.iter().enumerate() {
            if (self.mu.masses[idx as usize] - marg[s]).abs() > 1e-9 * marg[s].abs().max(1.0) {
                return Err(CoreError::InvalidField(format!(
                    "mu is not the target marginal at active node {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Lagrange multiplier field of the continuity equation.
#[derive(Debug, Clone)]
pub enum PhiField {
    /// d components per product cell.
    Dense { values: Vec<f64> },
    /// Structured competitor: phi(x, y) = y^T B(x) + |u(x) - y|^2 / 2 w(x)^T
    /// together with the discrete derivative fields the slack needs.
    Competitor(Box<CompetitorData>),
}

#[derive(Debug, Clone)]
pub struct CompetitorData {
    /// B = grad u (quadratic path) or DW(grad u) (general path), k x d.
    pub b_field: Field,
    /// Row-wise divergence of B: vector of length k.
    pub b_row_div: Field,
    /// grad u, needed by the cross term when w is nonzero.
    pub grad_u: Field,
    pub u: Field,
    pub w: Field,
    pub div_w: Field,
}

/// Relaxed dual triple with its computed feasibility margin.
#[derive(Debug, Clone)]
pub struct DualTriple {
    pub product: Arc<ProductGrid>,
    pub phi: PhiField,
    pub psi: Field,
    pub omega: Field,
    pub feasibility_margin: f64,
    /// The margin slack the discretization allows: 1e-8 + 10 h^2.
    pub feas_tol: f64,
    /// Margin interval midpoint parameter when built as a competitor.
    pub epsilon: Option<f64>,
}

impl DualTriple {
    pub fn is_admissible(&self) -> bool {
        self.feasibility_margin >= -self.feas_tol
    }
}

pub(crate) fn default_feas_tol(grid: &Grid) -> f64 {
    1e-8 + 10.0 * grid.h * grid.h
}
