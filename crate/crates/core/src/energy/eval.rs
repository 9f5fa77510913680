//! Quadrature of the total energy: stored energy of the discrete gradient
//! plus the potential, plus the image-measure penalty of the pushforward.

use super::{eval_phi, pushforward_for, ProblemSpec};
use crate::domain::{differentiate, DiffMode, Field, Rank};
use crate::error::{CoreError, Result};
use crate::numeric::par_sum_indexed;

/// E(u) = sum over cells of [W(grad u) + F(x, u)] vol + Phi(u # vol).
/// +inf is a value (infeasible image measure), not an error.
pub fn eval_energy(u: &Field, spec: &ProblemSpec) -> Result<f64> {
    let k = spec.dim_target();
    match u.rank {
        Rank::Vector(kk) if kk == k => {}
        _ => {
            return Err(CoreError::RankMismatch {
                op: "eval_energy",
                expected: "vector matching the target dimension",
                got: u.rank.to_string(),
            })
        }
    }
    u.validate()?;
    let dev = spec.boundary_deviation(u);
    let tol = spec.grid_omega.h;
    if dev > tol {
        return Err(CoreError::BoundaryMismatch { max_dev: dev, tol });
    }

    let grid = &spec.grid_omega;
    let grad = differentiate(u, DiffMode::Gradient)?;
    let kd = grad.components();
    let n = grid.in_nodes.len();
    let bulk = par_sum_indexed(n, |i| {
        let idx = grid.in_nodes[i] as usize;
        let vol = grid.volumes[idx];
        if vol <= 0.0 {
            return 0.0;
        }
        let c = &grad.values[idx * kd..(idx + 1) * kd];
        let w = spec.stored_energy.value(c);
        let p = grid.node_position(idx);
        let y = u.node_slice(idx);
        let f = spec.potential.value(&p[..grid.dim()], y);
        (w + f) * vol
    });

    let mu = pushforward_for(spec, u)?;
    let phi = eval_phi(&mu, &spec.penalty);
    Ok(bulk + phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec};
    use crate::energy::{ImagePenalty, PotentialSpec, StoredEnergySpec};

    fn identity(grid: &std::sync::Arc<crate::domain::Grid>) -> Field {
        let d = grid.dim();
        Field::from_fn(grid.clone(), Rank::Vector(d), |p, out| out.copy_from_slice(&p[..d]))
    }

    #[test]
    fn identity_energy_on_unit_square() {
        let g = build_grid(&DomainSpec::unit_square(), 32).unwrap();
        let u = identity(&g);
        let spec = ProblemSpec::new(
            g.clone(),
            g.clone(),
            ProblemSpec::boundary_from_field(&u),
            StoredEnergySpec::Quadratic,
            PotentialSpec::Zero,
            ImagePenalty::incompressible(0.05).unwrap(),
            2,
        )
        .unwrap();
        let e = eval_energy(&u, &spec).unwrap();
        assert!((e - 1.0).abs() < 0.01, "identity energy {e}");
    }

    #[test]
    fn affine_energy_closed_form() {
        // u = A x + b with det A = 1 maps the unit square onto a box
        let g = build_grid(&DomainSpec::unit_square(), 32).unwrap();
        let (s1, s2) = (1.25, 0.8);
        let target = DomainSpec::new(crate::domain::Shape::Box {
            origin: vec![0.1, -0.2],
            lengths: vec![s1, s2],
        })
        .unwrap();
        let gt = build_grid(&target, 32).unwrap();
        let u = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
            out[0] = s1 * p[0] + 0.1;
            out[1] = s2 * p[1] - 0.2;
        });
        let spec = ProblemSpec::new(
            g.clone(),
            gt,
            ProblemSpec::boundary_from_field(&u),
            StoredEnergySpec::Quadratic,
            PotentialSpec::Zero,
            ImagePenalty::incompressible(0.05).unwrap(),
            2,
        )
        .unwrap();
        let e = eval_energy(&u, &spec).unwrap();
        let exact = 0.5 * (s1 * s1 + s2 * s2);
        assert!((e - exact).abs() / exact < 0.01, "affine energy {e} vs {exact}");
    }

    #[test]
    fn violating_incompressibility_gives_infinity() {
        let g = build_grid(&DomainSpec::unit_square(), 16).unwrap();
        let u = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
            // squeezes mass toward the left edge
            out[0] = p[0] * p[0];
            out[1] = p[1];
        });
        let spec = ProblemSpec::new(
            g.clone(),
            g.clone(),
            ProblemSpec::boundary_from_field(&u),
            StoredEnergySpec::Quadratic,
            PotentialSpec::Zero,
            ImagePenalty::incompressible(0.05).unwrap(),
            2,
        )
        .unwrap();
        assert!(eval_energy(&u, &spec).unwrap().is_infinite());
    }

    #[test]
    fn boundary_mismatch_rejected() {
        let g = build_grid(&DomainSpec::unit_square(), 16).unwrap();
        let u = identity(&g);
        let mut shifted = u.clone();
        for v in shifted.values.iter_mut() {
            *v += 0.3;
        }
        let spec = ProblemSpec::new(
            g.clone(),
            g.clone(),
            ProblemSpec::boundary_from_field(&u),
            StoredEnergySpec::Quadratic,
            PotentialSpec::Zero,
            ImagePenalty::incompressible(0.05).unwrap(),
            2,
        )
        .unwrap();
        assert!(matches!(
            eval_energy(&shifted, &spec),
            Err(CoreError::BoundaryMismatch { .. })
        ));
    }

    #[test]
    fn refinement_shrinks_energy_error() {
        // u(x) = x + a sin(pi x) maps (0,1) onto itself with det grad = 1 + a pi cos(pi x).
        // Exact energy: 1/2 + (a pi)^2/4 for W plus (a pi)^2/2 for Phi_h with h = (t-1)^2.
        let a = 0.05;
        let c = a * std::f64::consts::PI;
        let exact = 0.5 + 0.25 * c * c + 0.5 * c * c;
        let mut errs = Vec::new();
        for n in [16usize, 32, 64, 128] {
            let spec1 = DomainSpec::interval(0.0, 1.0).unwrap();
            let g = build_grid(&spec1, n).unwrap();
            let u = Field::from_fn(g.clone(), Rank::Vector(1), |p, out| {
                out[0] = p[0] + a * (std::f64::consts::PI * p[0]).sin();
            });
            // binning noise is O(1/subsamples), so the quadrature family
            // refines along with the grid here
            let spec = ProblemSpec::new(
                g.clone(),
                g.clone(),
                ProblemSpec::boundary_from_field(&u),
                StoredEnergySpec::Quadratic,
                PotentialSpec::Zero,
                ImagePenalty::integral_h(crate::energy::DensityCost::Quadratic).unwrap(),
                (n / 8).max(2),
            )
            .unwrap();
            let e = eval_energy(&u, &spec).unwrap();
            errs.push((e - exact).abs());
        }
        assert!(
            errs[3] < errs[0],
            "errors not decreasing under refinement: {errs:?}"
        );
    }
}
