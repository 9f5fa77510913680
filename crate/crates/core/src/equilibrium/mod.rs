//! Analytic equilibrium pairs and verification of the weak Euler-Lagrange
//! system against a fixed test-function family.

mod basis;
mod residual;
mod second_variation;

pub use basis::TestBasis;
pub use residual::el_residual;
pub use second_variation::second_variation_torsion;

use crate::domain::{Field, Rank, Shape};
use crate::energy::{PotentialSpec, ProblemSpec, PsiForm};
use crate::error::{CoreError, Result};

/// Which analytic family a pair came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Affine { matrix: Vec<f64>, offset: Vec<f64> },
    Torsion { a: f64 },
    IdentityPotential { psi: PsiForm },
    External,
}

/// A deformation with its pressure in the deformed configuration.
#[derive(Debug, Clone)]
pub struct EquilibriumPair {
    pub u: Field,
    pub omega: Field,
    pub family: Family,
}

impl EquilibriumPair {
    /// Wrap externally produced fields; validated numerically only.
    pub fn external(u: Field, omega: Field, spec: &ProblemSpec) -> Result<Self> {
        u.validate()?;
        omega.validate()?;
        let dev = spec.boundary_deviation(&u);
        if dev > spec.grid_omega.h {
            return Err(CoreError::BoundaryMismatch { max_dev: dev, tol: spec.grid_omega.h });
        }
        Ok(EquilibriumPair { u, omega, family: Family::External })
    }
}

/// Construct a gallery pair on the grids of `spec`.
///
/// affine: u = A x + b with constant pressure zero (valid whenever the image
/// density is uniform and phi_h'(1) = 0, or for the incompressible penalty).
/// torsion(a): each horizontal slice of the cylinder rotated by angle a z,
/// with pressure -(a^2/2)|y_h|^2. identity_potential(psi): the identity with
/// pressure psi, an equilibrium when F = -grad psi(x) . y.
pub fn gallery_map(family: &Family, spec: &ProblemSpec) -> Result<EquilibriumPair> {
    let grid = &spec.grid_omega;
    let grid_d = &spec.grid_target;
    let d = grid.dim();
    let k = grid_d.dim();
    match family {
        Family::Affine { matrix, offset } => {
            if matrix.len() != k * d || offset.len() != k {
                return Err(CoreError::PreconditionViolated(format!(
                    "affine family needs a {k}x{d} matrix and offset of length {k}"
                )));
            }
            let (matrix, offset) = (matrix.clone(), offset.clone());
            let u = Field::from_fn(grid.clone(), Rank::Vector(k), move |p, out| {
                for c in 0..k {
                    let mut v = offset[c];
                    for a in 0..d {
                        v += matrix[c * d + a] * p[a];
                    }
                    out[c] = v;
                }
            });
            let omega = Field::zeros(grid_d.clone(), Rank::Scalar);
            Ok(EquilibriumPair { u, omega, family: family.clone() })
        }
        Family::Torsion { a } => {
            match (&grid.spec.shape, &grid_d.spec.shape) {
                (Shape::Cylinder { .. }, Shape::Cylinder { .. }) => {}
                _ => {
                    return Err(CoreError::PreconditionViolated(
                        "torsion requires cylinder source and target".into(),
                    ))
                }
            }
            let a = *a;
            let u = Field::from_fn(grid.clone(), Rank::Vector(3), move |p, out| {
                let th = a * p[2];
                let (s, c) = th.sin_cos();
                out[0] = c * p[0] - s * p[1];
                out[1] = s * p[0] + c * p[1];
                out[2] = p[2];
            });
            let omega = Field::scalar_from_fn(grid_d.clone(), move |y| {
                -(a * a / 2.0) * (y[0] * y[0] + y[1] * y[1])
            });
            Ok(EquilibriumPair { u, omega, family: family.clone() })
        }
        Family::IdentityPotential { psi } => {
            match &spec.potential {
                PotentialSpec::PotentialPullback { psi: spec_psi } if spec_psi == psi => {}
                _ => {
                    return Err(CoreError::PreconditionViolated(
                        "identity_potential requires the matching pullback potential in the problem"
                            .into(),
                    ))
                }
            }
            if d != k {
                return Err(CoreError::PreconditionViolated(
                    "identity_potential requires matching dimensions".into(),
                ));
            }
            let u = Field::from_fn(grid.clone(), Rank::Vector(k), |p, out| {
                out.copy_from_slice(&p[..p.len()])
            });
            let psi = *psi;
            let omega = Field::scalar_from_fn(grid_d.clone(), move |y| psi.value(y));
            Ok(EquilibriumPair { u, omega, family: family.clone() })
        }
        Family::External => Err(CoreError::PreconditionViolated(
            "external pairs are loaded from fields, not generated".into(),
        )),
    }
}
