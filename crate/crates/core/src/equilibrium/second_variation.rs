//! Second variation of the auxiliary energy along the torsion family: the
//! coefficient of eps^2 in the expansion of the energy at u_a + eps q is
//! int (|grad q|^2 - a^2 |q_h|^2) / 2; negative values witness instability.

use crate::domain::{differentiate, DiffMode, Field, Grid, Rank, Shape};
use crate::error::{CoreError, Result};
use crate::numeric::pairwise_sum;

pub fn second_variation_torsion(a: f64, q: &Field, grid: &Grid) -> Result<f64> {
    if !matches!(grid.spec.shape, Shape::Cylinder { .. }) {
        return Err(CoreError::PreconditionViolated(
            "second_variation_torsion requires a cylinder grid".into(),
        ));
    }
    match q.rank {
        Rank::Vector(3) => {}
        _ => {
            return Err(CoreError::RankMismatch {
                op: "second_variation_torsion",
                expected: "vector(3)",
                got: q.rank.to_string(),
            })
        }
    }
    for &b in &grid.boundary_nodes {
        let vals = q.node_slice(b as usize);
        if vals.iter().any(|v| v.abs() > 1e-12) {
            return Err(CoreError::PreconditionViolated(
                "displacement must vanish at boundary nodes".into(),
            ));
        }
    }
    let grad = differentiate(q, DiffMode::Gradient)?;
    let kd = grad.components();
    let terms: Vec<f64> = grid
        .in_nodes
        .iter()
        .map(|&idx32| {
            let idx = idx32 as usize;
            let vol = grid.volumes[idx];
            if vol <= 0.0 {
                return 0.0;
            }
            let g = grad.node_slice(idx);
            let grad_sq: f64 = g[..kd].iter().map(|x| x * x).sum();
            let qh_sq = q.value(idx, 0).powi(2) + q.value(idx, 1).powi(2);
            0.5 * (grad_sq - a * a * qh_sq) * vol
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, dirichlet_lambda1, DomainSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bump_field(grid: &std::sync::Arc<Grid>) -> Field {
        // smooth horizontal displacement vanishing on the boundary
        let mut f = Field::from_fn(grid.clone(), Rank::Vector(3), |p, out| {
            let q = (1.0 - p[0] * p[0] - p[1] * p[1]).max(0.0)
                * (std::f64::consts::PI * p[2]).sin();
            out[0] = q;
            out[1] = 0.3 * q;
            out[2] = 0.0;
        });
        for &b in &grid.boundary_nodes.clone() {
            for c in 0..3 {
                f.set(b as usize, c, 0.0);
            }
        }
        f
    }

    #[test]
    fn zero_displacement_gives_zero() {
        let g = build_grid(&DomainSpec::unit_cylinder(), 10).unwrap();
        let q = Field::zeros(g.clone(), Rank::Vector(3));
        assert_abs_diff_eq!(second_variation_torsion(1.0, &q, &g).unwrap(), 0.0);
    }

    #[test]
    fn zero_twist_is_positive() {
        let g = build_grid(&DomainSpec::unit_cylinder(), 12).unwrap();
        let q = bump_field(&g);
        let v = second_variation_torsion(0.0, &q, &g).unwrap();
        assert!(v > 0.0, "Dirichlet energy must be positive, got {v}");
    }

    #[test]
    fn analytic_bump_matches_rayleigh_oracle() {
        // q = (1 - r^2/rc^2)_+^2 sin(pi z) e_1 is C^1, supported strictly
        // inside the staircase ring, with closed-form quadratures:
        //   int |q|^2 = pi rc^2 / 10
        //   int |grad q|^2 = 2 pi/3 + pi^3 rc^2 / 10
        let g = build_grid(&DomainSpec::unit_cylinder(), 24).unwrap();
        let rc = 1.0 - 2.5 * g.h;
        let q = Field::from_fn(g.clone(), Rank::Vector(3), |p, out| {
            let rho = (p[0] * p[0] + p[1] * p[1]) / (rc * rc);
            out[0] = (1.0 - rho).max(0.0).powi(2) * (std::f64::consts::PI * p[2]).sin();
        });
        let pi = std::f64::consts::PI;
        let grad_sq = 2.0 * pi / 3.0 + pi.powi(3) * rc * rc / 10.0;
        let norm_sq = pi * rc * rc / 10.0;
        for a in [1.0f64, 2.0, 8.0] {
            let v = second_variation_torsion(a, &q, &g).unwrap();
            let oracle = 0.5 * (grad_sq - a * a * norm_sq);
            assert!(
                (v - oracle).abs() <= 0.05 * oracle.abs().max(0.5),
                "a={a}: {v} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn eigenfunction_displacement_sign_dichotomy() {
        let g = build_grid(&DomainSpec::unit_cylinder(), 16).unwrap();
        let eig = dirichlet_lambda1(&g, 1e-8).unwrap();
        let mut q = Field::zeros(g.clone(), Rank::Vector(3));
        for &i in &g.in_nodes {
            q.set(i as usize, 0, eig.eigenfunction.values[i as usize]);
        }
        for &b in &g.boundary_nodes {
            q.set(b as usize, 0, 0.0);
        }
        // small twist: positive; twist far beyond sqrt(lambda1): negative
        assert!(second_variation_torsion(1.0, &q, &g).unwrap() > 0.0);
        assert!(second_variation_torsion(8.0, &q, &g).unwrap() < 0.0);
    }

    #[test]
    fn rejects_nonzero_boundary() {
        let g = build_grid(&DomainSpec::unit_cylinder(), 8).unwrap();
        let q = Field::from_fn(g.clone(), Rank::Vector(3), |_, out| out[0] = 1.0);
        assert!(second_variation_torsion(1.0, &q, &g).is_err());
    }

    proptest! {
        #[test]
        fn quadratic_in_the_displacement(alpha in -3.0f64..3.0) {
            prop_assume!(alpha.abs() > 1e-3);
            let g = build_grid(&DomainSpec::unit_cylinder(), 8).unwrap();
            let q = bump_field(&g);
            let mut qa = q.clone();
            qa.scale(alpha);
            let v1 = second_variation_torsion(1.3, &q, &g).unwrap();
            let v2 = second_variation_torsion(1.3, &qa, &g).unwrap();
            prop_assert!((v2 - alpha * alpha * v1).abs() <= 1e-10 * v1.abs().max(1.0));
        }
    }
}
