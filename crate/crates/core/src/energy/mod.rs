//! Problem data and the total energy: stored-energy densities, potentials,
//! image-measure penalties, pushforward measures and Legendre transforms.

mod eval;
mod measure;
mod penalty;

/// Quadrature internals shared with the relaxation module.
pub(crate) mod measure_internals {
    pub(crate) use super::measure::{
        for_each_subcell, identity_reference, image_extents, splat_deposit, taylor_image,
    };
}

pub use eval::eval_energy;
pub use measure::{pushforward, pushforward_for, write_measure_csv, MeasureOnD};
pub use penalty::{
    eval_phi, phi_h_conjugate, phi_h_prime, phi_h_value, phi_star, subdifferential_pressure,
    PhiStarValue,
};

use crate::domain::{Field, Grid};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Stored-energy density W on k x d matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum StoredEnergySpec {
    /// W(C) = |C|^2 / 2 (Frobenius norm).
    Quadratic,
    /// W(C) = |C|^p / p, p > 1.
    PPower { p: f64 },
}

impl StoredEnergySpec {
    pub fn validate(&self) -> Result<()> {
        if let StoredEnergySpec::PPower { p } = self {
            if !(*p > 1.0) {
                return Err(CoreError::PreconditionViolated(format!(
                    "p_power exponent must exceed 1, got {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn exponent(&self) -> f64 {
        match self {
            StoredEnergySpec::Quadratic => 2.0,
            StoredEnergySpec::PPower { p } => *p,
        }
    }

    /// Declared convexity modulus: 1 for the quadratic form, 0 otherwise.
    pub fn lambda_w(&self) -> f64 {
        match self {
            StoredEnergySpec::Quadratic => 1.0,
            StoredEnergySpec::PPower { p } => {
                if (*p - 2.0).abs() < 1e-14 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn strictly_convex(&self) -> bool {
        true // both catalog forms are strictly convex for p > 1
    }

    pub fn value(&self, c: &[f64]) -> f64 {
        let norm_sq: f64 = c.iter().map(|x| x * x).sum();
        match self {
            StoredEnergySpec::Quadratic => 0.5 * norm_sq,
            StoredEnergySpec::PPower { p } => norm_sq.sqrt().powf(*p) / p,
        }
    }

    /// DW(C), same layout as the argument.
    pub fn derivative(&self, c: &[f64], out: &mut [f64]) {
        match self {
            StoredEnergySpec::Quadratic => out.copy_from_slice(c),
            StoredEnergySpec::PPower { p } => {
                let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    out.fill(0.0);
                } else {
                    let scale = norm.powf(p - 2.0);
                    for (o, x) in out.iter_mut().zip(c) {
                        *o = scale * x;
                    }
                }
            }
        }
    }

    /// Legendre transform W*(M): |M|^2/2 for quadratic, |M|^q/q with the
    /// conjugate exponent for p_power.
    pub fn conjugate(&self, m: &[f64]) -> f64 {
        let norm_sq: f64 = m.iter().map(|x| x * x).sum();
        match self {
            StoredEnergySpec::Quadratic => 0.5 * norm_sq,
            StoredEnergySpec::PPower { p } => {
                let q = p / (p - 1.0);
                norm_sq.sqrt().powf(q) / q
            }
        }
    }
}

/// Catalog of supplied potentials psi used by the pullback form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum PsiForm {
    /// psi(y) = |y - center|^2 / 2.
    HalfSquare { center: [f64; 3] },
}

impl PsiForm {
    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            PsiForm::HalfSquare { center } => {
                y.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5
            }
        }
    }

    pub fn gradient(&self, y: &[f64], out: &mut [f64]) {
        match self {
            PsiForm::HalfSquare { center } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = y[j] - center[j];
                }
            }
        }
    }

    pub fn strictly_convex(&self) -> bool {
        true
    }
}

/// Potential F(x, y), convex in y with declared modulus lambda_F.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum PotentialSpec {
    Zero,
    /// F(x, y) = -force . y with a constant force.
    Linear { force: Vec<f64> },
    /// F(x, y) = -grad psi(x) . y: the force field is the gradient of a
    /// supplied potential, evaluated at the reference point. The identity map
    /// paired with pressure omega = psi is then an equilibrium.
    PotentialPullback { psi: PsiForm },
    /// F(x, y) = (c/2) |y - center|^2.
    QuadraticWell { c: f64, center: Vec<f64> },
}

impl PotentialSpec {
    pub fn validate(&self) -> Result<()> {
        if let PotentialSpec::QuadraticWell { c, .. } = self {
            if !(*c > 0.0) {
                return Err(CoreError::PreconditionViolated(format!(
                    "quadratic well modulus must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn lambda_f(&self) -> f64 {
        match self {
            PotentialSpec::Zero | PotentialSpec::Linear { .. } | PotentialSpec::PotentialPullback { .. } => 0.0,
            PotentialSpec::QuadraticWell { c, .. } => *c,
        }
    }

    pub fn strictly_convex(&self) -> bool {
        matches!(self, PotentialSpec::QuadraticWell { .. })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PotentialSpec::Zero)
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            PotentialSpec::Zero => 0.0,
            PotentialSpec::Linear { force } => -force.iter().zip(y).map(|(f, v)| f * v).sum::<f64>(),
            PotentialSpec::PotentialPullback { psi } => {
                let mut g = [0.0; 3];
                psi.gradient(x, &mut g[..y.len()]);
                -g[..y.len()].iter().zip(y).map(|(f, v)| f * v).sum::<f64>()
            }
            PotentialSpec::QuadraticWell { c, center } => {
                0.5 * c * y.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
        }
    }

    /// DF(x, y): derivative with respect to y.
    pub fn derivative(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            PotentialSpec::Zero => out.fill(0.0),
            PotentialSpec::Linear { force } => {
                for (o, f) in out.iter_mut().zip(force) {
                    *o = -f;
                }
            }
            PotentialSpec::PotentialPullback { psi } => {
                let k = out.len();
                let mut g = [0.0; 3];
                psi.gradient(x, &mut g[..k]);
                for (o, f) in out.iter_mut().zip(&g[..k]) {
                    *o = -f;
                }
            }
            PotentialSpec::QuadraticWell { c, center } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = c * (y[j] - center[j]);
                }
            }
        }
    }
}

/// Catalog of convex functions h on (0, inf) defining the compressible
/// penalty through phi_h(s) = h(1/s) s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityCost {
    /// h(t) = (t - 1)^2.
    Quadratic,
    /// h(t) = -ln t + t - 1.
    LogBarrier,
}

impl DensityCost {
    pub fn h(&self, t: f64) -> f64 {
        match self {
            DensityCost::Quadratic => (t - 1.0) * (t - 1.0),
            DensityCost::LogBarrier => -t.ln() + t - 1.0,
        }
    }

    pub fn h_prime(&self, t: f64) -> f64 {
        match self {
            DensityCost::Quadratic => 2.0 * (t - 1.0),
            DensityCost::LogBarrier => -1.0 / t + 1.0,
        }
    }

    /// lim_{t -> 0+} h(t) = the slope of phi_h at infinity; the pointwise
    /// conjugate is finite only strictly below it.
    pub fn h_at_zero(&self) -> f64 {
        match self {
            DensityCost::Quadratic => 1.0,
            DensityCost::LogBarrier => f64::INFINITY,
        }
    }
}

/// Image-measure penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ImagePenalty {
    /// Hard incompressibility up to a per-cell density tolerance.
    Incompressible { density_tol: f64 },
    /// Integral of phi_h(density) over the target.
    IntegralH { h: DensityCost },
}

impl ImagePenalty {
    pub fn incompressible(density_tol: f64) -> Result<Self> {
        if !(density_tol > 0.0) {
            return Err(CoreError::PreconditionViolated(format!(
                "density tolerance must be positive, got {density_tol}"
            )));
        }
        Ok(ImagePenalty::Incompressible { density_tol })
    }

    /// Constructor checks convexity of phi_h by sampled second differences
    /// on a log grid over [1e-3, 1e3].
    pub fn integral_h(h: DensityCost) -> Result<Self> {
        let mut worst = f64::INFINITY;
        let n = 240;
        for i in 1..n - 1 {
            let t = |j: usize| 1e-3 * (1e6f64).powf(j as f64 / (n - 1) as f64);
            let (s0, s1, s2) = (t(i - 1), t(i), t(i + 1));
            let second = (phi_h_value_raw(h, s2) - phi_h_value_raw(h, s1))
                / (s2 - s1)
                - (phi_h_value_raw(h, s1) - phi_h_value_raw(h, s0)) / (s1 - s0);
            worst = worst.min(second);
        }
        if worst < -1e-10 {
            return Err(CoreError::PreconditionViolated(format!(
                "phi_h fails sampled convexity check: min slope difference {worst:.3e}"
            )));
        }
        Ok(ImagePenalty::IntegralH { h })
    }

    /// A grid-relative default density tolerance: 0.05 at 32 cells per axis,
    /// scaled with the spacing.
    pub fn default_density_tol(resolution: usize) -> f64 {
        (0.05 * 32.0 / resolution as f64).clamp(0.01, 0.2)
    }
}

pub(crate) fn phi_h_value_raw(h: DensityCost, s: f64) -> f64 {
    h.h(1.0 / s) * s
}

/// Full problem data on a pair of grids.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub grid_omega: Arc<Grid>,
    pub grid_target: Arc<Grid>,
    /// Deformation values at boundary nodes of grid_omega, flattened k per
    /// node in `grid_omega.boundary_nodes` order.
    pub boundary_map: Vec<f64>,
    pub stored_energy: StoredEnergySpec,
    pub potential: PotentialSpec,
    pub penalty: ImagePenalty,
    /// Pushforward subcell resolution used by energy evaluation.
    pub subsamples: usize,
}

impl ProblemSpec {
    pub fn new(
        grid_omega: Arc<Grid>,
        grid_target: Arc<Grid>,
        boundary_map: Vec<f64>,
        stored_energy: StoredEnergySpec,
        potential: PotentialSpec,
        penalty: ImagePenalty,
        subsamples: usize,
    ) -> Result<Self> {
        stored_energy.validate()?;
        potential.validate()?;
        if subsamples < 1 {
            return Err(CoreError::PreconditionViolated(
                "subsamples must be at least 1".into(),
            ));
        }
        let k = grid_target.dim();
        if boundary_map.len() != grid_omega.boundary_nodes.len() * k {
            return Err(CoreError::GridMismatch(format!(
                "boundary map carries {} values, expected {} nodes x {} components",
                boundary_map.len(),
                grid_omega.boundary_nodes.len(),
                k
            )));
        }
        let spec = ProblemSpec {
            grid_omega,
            grid_target,
            boundary_map,
            stored_energy,
            potential,
            penalty,
            subsamples,
        };
        spec.check_boundary_on_target()?;
        Ok(spec)
    }

    /// Boundary values must lie on (or within a lattice cell of) the target
    /// boundary.
    fn check_boundary_on_target(&self) -> Result<()> {
        let k = self.grid_target.dim();
        let tol = self.grid_target.h * (k as f64).sqrt();
        let mut worst = 0.0f64;
        for (i, _) in self.grid_omega.boundary_nodes.iter().enumerate() {
            let y = &self.boundary_map[i * k..(i + 1) * k];
            worst = worst.max(self.grid_target.spec.signed_distance(y).abs());
        }
        if worst > tol {
            return Err(CoreError::BoundaryMismatch { max_dev: worst, tol });
        }
        Ok(())
    }

    pub fn dim_omega(&self) -> usize {
        self.grid_omega.dim()
    }

    pub fn dim_target(&self) -> usize {
        self.grid_target.dim()
    }

    pub fn lambda_w(&self) -> f64 {
        self.stored_energy.lambda_w()
    }

    pub fn lambda_f(&self) -> f64 {
        self.potential.lambda_f()
    }

    /// Take the boundary map from the trace of a deformation field.
    pub fn boundary_from_field(u: &Field) -> Vec<f64> {
        let grid = &u.grid;
        let k = u.components();
        let mut out = Vec::with_capacity(grid.boundary_nodes.len() * k);
        for &b in &grid.boundary_nodes {
            out.extend_from_slice(u.node_slice(b as usize));
        }
        out
    }

    /// Max deviation of u from the boundary map at boundary nodes.
    pub fn boundary_deviation(&self, u: &Field) -> f64 {
        let k = self.grid_target.dim();
        let mut worst = 0.0f64;
        for (i, &b) in self.grid_omega.boundary_nodes.iter().enumerate() {
            let vals = u.node_slice(b as usize);
            let want = &self.boundary_map[i * k..(i + 1) * k];
            for j in 0..k {
                worst = worst.max((vals[j] - want[j]).abs());
            }
        }
        worst
    }
}


/// Test scaffolding: expose the subcell walk for diagnostics.
pub fn debug_subcells<F: FnMut(&[f64], &[f64], f64)>(
    grid: &crate::domain::Grid,
    node: usize,
    subsamples: usize,
    f: &mut F,
) {
    measure::for_each_subcell(grid, node, subsamples, f)
}
