//! Weak Euler-Lagrange residual: for test fields v = m e_c with m from the
//! fixed basis, the quadrature of grad v : DW(grad u) + v . (DF(u) + (grad
//! omega) o u) must vanish at an equilibrium. Any finite basis makes this a
//! necessary check only; reports label it basis-restricted.

use super::{EquilibriumPair, TestBasis};
use crate::domain::{differentiate, interpolate_vector, DiffMode, Rank};
use crate::energy::ProblemSpec;
use crate::error::{CoreError, Result};
use crate::numeric::pairwise_sum;
use rayon::prelude::*;

/// Max over the test family of the absolute weak-form pairing.
pub fn el_residual(pair: &EquilibriumPair, spec: &ProblemSpec, basis_size: usize) -> Result<f64> {
    let grid = &spec.grid_omega;
    let grid_d = &spec.grid_target;
    let d = grid.dim();
    let k = grid_d.dim();
    match pair.u.rank {
        Rank::Vector(kk) if kk == k => {}
        _ => {
            return Err(CoreError::RankMismatch {
                op: "el_residual",
                expected: "vector matching the target dimension",
                got: pair.u.rank.to_string(),
            })
        }
    }
    let grad_u = differentiate(&pair.u, DiffMode::Gradient)?;
    let grad_omega = differentiate(&pair.omega, DiffMode::Gradient)?;

    // Per-node data independent of the test mode: DW(grad u) and
    // DF(x, u) + (grad omega)(u).
    let n = grid.in_nodes.len();
    let kd = k * d;
    let mut dw = vec![0.0; n * kd];
    let mut force = vec![0.0; n * k];
    let tol = grid_d.h * (k as f64).sqrt();
    let mut worst_exit = 0.0f64;
    for (i, &idx32) in grid.in_nodes.iter().enumerate() {
        let idx = idx32 as usize;
        let c = grad_u.node_slice(idx);
        spec.stored_energy.derivative(c, &mut dw[i * kd..(i + 1) * kd]);
        let y = pair.u.node_slice(idx);
        let sd = grid_d.spec.signed_distance(y);
        if sd > worst_exit {
            worst_exit = sd;
        }
        let x = grid.node_position(idx);
        let mut df = vec![0.0; k];
        spec.potential.derivative(&x[..d], y, &mut df);
        let mut go = vec![0.0; k];
        interpolate_vector(&grad_omega, y, &mut go);
        for c in 0..k {
            force[i * k + c] = df[c] + go[c];
        }
    }
    if worst_exit > tol {
        return Err(CoreError::ImageOutsideTarget { dist: worst_exit, tol });
    }

    let basis = TestBasis::for_grid(grid, basis_size, spec.stored_energy.exponent());
    let residual = basis
        .modes
        .par_iter()
        .map(|mode| {
            let mut worst = 0.0f64;
            for c in 0..k {
                let terms: Vec<f64> = grid
                    .in_nodes
                    .iter()
                    .enumerate()
                    .map(|(i, &idx32)| {
                        let idx = idx32 as usize;
                        let vol = grid.volumes[idx];
                        if vol <= 0.0 {
                            return 0.0;
                        }
                        let x = grid.node_position(idx);
                        let m = mode.value(&x[..d]);
                        let mut gm = [0.0; 3];
                        mode.gradient(&x[..d], &mut gm);
                        let mut t = m * force[i * k + c];
                        for a in 0..d {
                            t += gm[a] * dw[i * kd + c * d + a];
                        }
                        t * vol
                    })
                    .collect();
                worst = worst.max(pairwise_sum(&terms).abs());
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    Ok(residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec, Field};
    use crate::energy::{ImagePenalty, PotentialSpec, PsiForm, StoredEnergySpec};
    use crate::equilibrium::{gallery_map, Family};

    fn spec_on(domain: DomainSpec, n: usize, potential: PotentialSpec) -> ProblemSpec {
        let g = build_grid(&domain, n).unwrap();
        let d = g.dim();
        let u = Field::from_fn(g.clone(), Rank::Vector(d), |p, out| {
            out.copy_from_slice(&p[..d])
        });
        ProblemSpec::new(
            g.clone(),
            g,
            ProblemSpec::boundary_from_field(&u),
            StoredEnergySpec::Quadratic,
            potential,
            ImagePenalty::incompressible(0.05).unwrap(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn affine_residual_vanishes() {
        let (s1, s2) = (1.1, 1.0 / 1.1);
        let g = build_grid(&DomainSpec::unit_square(), 24).unwrap();
        let target = DomainSpec::new(crate::domain::Shape::Box {
            origin: vec![0.0, 0.0],
            lengths: vec![s1, s2],
        })
        .unwrap();
        let gt = build_grid(&target, 24).unwrap();
        let u = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
            out[0] = s1 * p[0];
            out[1] = s2 * p[1];
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
        let pair = gallery_map(
            &Family::Affine { matrix: vec![s1, 0.0, 0.0, s2], offset: vec![0.0, 0.0] },
            &spec,
        )
        .unwrap();
        let r = el_residual(&pair, &spec, 4).unwrap();
        assert!(r <= 1e-10, "affine residual {r}");
        // independent of basis size
        let r2 = el_residual(&pair, &spec, 6).unwrap();
        assert!((r - r2).abs() <= 1e-10);
    }

    #[test]
    fn residual_invariant_under_pressure_shift() {
        let spec = spec_on(DomainSpec::unit_square(), 16, PotentialSpec::Zero);
        let mut pair = gallery_map(
            &Family::Affine { matrix: vec![1.0, 0.0, 0.0, 1.0], offset: vec![0.0, 0.0] },
            &spec,
        )
        .unwrap();
        pair.omega = Field::scalar_from_fn(spec.grid_target.clone(), |p| {
            0.3 * p[0] * p[1] + 0.1
        });
        let r1 = el_residual(&pair, &spec, 3).unwrap();
        for v in pair.omega.values.iter_mut() {
            *v += 17.5;
        }
        let r2 = el_residual(&pair, &spec, 3).unwrap();
        assert!((r1 - r2).abs() <= 1e-12, "{r1} vs {r2}");
    }

    #[test]
    fn torsion_residual_second_order() {
        let mut residuals = Vec::new();
        for n in [12usize, 24] {
            let spec = spec_on(DomainSpec::unit_cylinder(), n, PotentialSpec::Zero);
            let pair = gallery_map(&Family::Torsion { a: 1.0 }, &spec).unwrap();
            residuals.push(el_residual(&pair, &spec, 3).unwrap());
        }
        let h0 = 2.0 / 12.0;
        assert!(
            residuals[0] <= 10.0 * h0 * h0,
            "torsion residual {} above tolerance {}",
            residuals[0],
            10.0 * h0 * h0
        );
        // roughly second order: quartering h should cut the residual by ~4
        assert!(
            residuals[1] <= 0.5 * residuals[0] + 1e-12,
            "no decay: {residuals:?}"
        );
    }

    #[test]
    fn identity_potential_residual_vanishes() {
        let psi = PsiForm::HalfSquare { center: [0.0; 3] };
        let spec = spec_on(
            DomainSpec::unit_square(),
            16,
            PotentialSpec::PotentialPullback { psi },
        );
        let pair = gallery_map(&Family::IdentityPotential { psi }, &spec).unwrap();
        let r = el_residual(&pair, &spec, 4).unwrap();
        let h = spec.grid_omega.h;
        assert!(r <= 10.0 * h * h, "identity-potential residual {r}");
    }
}
