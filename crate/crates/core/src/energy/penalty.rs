//! The image-measure penalties, their pointwise conjugates and the pressure
//! subdifferential.

use super::{phi_h_value_raw, DensityCost, ImagePenalty, MeasureOnD};
use crate::domain::{Field, Rank};
use crate::error::{CoreError, Result};
use crate::numeric::{bisect_increasing, pairwise_sum};

const DENSITY_FLOOR: f64 = 1e-8;

/// phi_h(s) = h(1/s) s for s > 0.
pub fn phi_h_value(h: DensityCost, s: f64) -> f64 {
    assert!(s > 0.0, "phi_h is defined on (0, inf), got {s}");
    phi_h_value_raw(h, s)
}

/// phi_h'(s) = h(1/s) - h'(1/s)/s.
pub fn phi_h_prime(h: DensityCost, s: f64) -> f64 {
    assert!(s > 0.0);
    h.h(1.0 / s) - h.h_prime(1.0 / s) / s
}

/// Pointwise Legendre transform phi_h*(r) = sup_{s>0} (r s - phi_h(s)),
/// by bisection on the monotone derivative to relative tolerance 1e-10.
/// Returns +inf when r reaches the slope of phi_h at infinity.
pub fn phi_h_conjugate(h: DensityCost, r: f64) -> f64 {
    let slope_inf = h.h_at_zero();
    if r >= slope_inf {
        return f64::INFINITY;
    }
    // Bracket the maximizer: phi_h' is increasing with range (-inf, slope_inf).
    let mut lo = 1.0;
    while phi_h_prime(h, lo) > r && lo > 1e-150 {
        lo *= 0.5;
    }
    let mut hi = 1.0;
    while phi_h_prime(h, hi) < r && hi < 1e150 {
        hi *= 2.0;
    }
    if hi >= 1e150 {
        return f64::INFINITY;
    }
    let s_star = bisect_increasing(|s| phi_h_prime(h, s) - r, lo, hi, 1e-10);
    r * s_star - phi_h_value(h, s_star)
}

/// Quadrature of the penalty at a measure: 0 / +inf for the incompressible
/// variant, integral of phi_h(density) otherwise.
pub fn eval_phi(mu: &MeasureOnD, penalty: &ImagePenalty) -> f64 {
    match penalty {
        ImagePenalty::Incompressible { density_tol } => {
            // Total-variation distance to the uniform measure: the per-cell
            // sup of a binned density oscillates O(1) at boundary cells even
            // for exactly measure-preserving maps.
            if mu.tv_uniform_deviation() <= *density_tol {
                0.0
            } else {
                f64::INFINITY
            }
        }
        ImagePenalty::IntegralH { h } => {
            let grid = &mu.grid;
            let ref_floor = 1e-6 * grid.cell_reference_volume();
            let terms: Vec<f64> = grid
                .in_nodes
                .iter()
                .map(|&idx32| {
                    let idx = idx32 as usize;
                    let vol = mu.ref_volumes[idx];
                    let mass = mu.masses[idx];
                    if vol <= 0.0 && mass <= ref_floor {
                        return 0.0;
                    }
                    let vol = vol.max(ref_floor);
                    let s = mass / vol;
                    if s <= 0.0 {
                        // phi_h(0+) limit: finite for log-barrier, +inf otherwise
                        let lim = phi_h_limit_at_zero(*h);
                        lim * vol
                    } else {
                        phi_h_value(*h, s) * vol
                    }
                })
                .collect();
            pairwise_sum(&terms)
        }
    }
}

fn phi_h_limit_at_zero(h: DensityCost) -> f64 {
    match h {
        // (1-s)^2/s -> +inf
        DensityCost::Quadratic => f64::INFINITY,
        // s ln s + 1 - s -> 1
        DensityCost::LogBarrier => 1.0,
    }
}

/// Result of the penalty conjugate: a value plus an unboundedness flag.
#[derive(Debug, Clone, Copy)]
pub struct PhiStarValue {
    pub value: f64,
    pub unbounded: bool,
}

/// Legendre transform of the penalty at a continuous pressure field:
/// integral of omega for the incompressible variant, quadrature of the
/// pointwise conjugate phi_h*(omega) otherwise.
pub fn phi_star(omega: &Field, penalty: &ImagePenalty) -> Result<PhiStarValue> {
    if omega.rank != Rank::Scalar {
        return Err(CoreError::RankMismatch {
            op: "phi_star",
            expected: "scalar",
            got: omega.rank.to_string(),
        });
    }
    omega.validate()?;
    let grid = &omega.grid;
    match penalty {
        ImagePenalty::Incompressible { .. } => {
            let terms: Vec<f64> = grid
                .in_nodes
                .iter()
                .map(|&i| omega.values[i as usize] * grid.volumes[i as usize])
                .collect();
            Ok(PhiStarValue { value: pairwise_sum(&terms), unbounded: false })
        }
        ImagePenalty::IntegralH { h } => {
            let mut unbounded = false;
            let terms: Vec<f64> = grid
                .in_nodes
                .iter()
                .map(|&i| {
                    let idx = i as usize;
                    let vol = grid.volumes[idx];
                    if vol <= 0.0 {
                        return 0.0;
                    }
                    let c = phi_h_conjugate(*h, omega.values[idx]);
                    if c.is_infinite() {
                        unbounded = true;
                    }
                    c * vol
                })
                .collect();
            let value = if unbounded { f64::INFINITY } else { pairwise_sum(&terms) };
            Ok(PhiStarValue { value, unbounded })
        }
    }
}

/// The unique pressure phi_h'(density) of the compressible penalty. The
/// incompressible penalty admits any continuous pressure, so asking for one
/// is an error.
pub fn subdifferential_pressure(mu: &MeasureOnD, penalty: &ImagePenalty) -> Result<Field> {
    let h = match penalty {
        ImagePenalty::Incompressible { .. } => return Err(CoreError::PressureUndetermined),
        ImagePenalty::IntegralH { h } => *h,
    };
    let grid = &mu.grid;
    let mut min_density = f64::INFINITY;
    for &idx32 in &grid.in_nodes {
        let idx = idx32 as usize;
        if grid.volumes[idx] > 0.0 {
            min_density = min_density.min(mu.density(idx));
        }
    }
    if min_density < DENSITY_FLOOR {
        return Err(CoreError::VanishingDensity { min: min_density, floor: DENSITY_FLOOR });
    }
    let mut omega = Field::zeros(grid.clone(), Rank::Scalar);
    for &idx32 in &grid.in_nodes {
        let idx = idx32 as usize;
        if grid.volumes[idx] > 0.0 {
            omega.values[idx] = phi_h_prime(h, mu.density(idx));
        }
    }
    Ok(omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec};
    use crate::energy::pushforward;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn uniform_measure(n: usize) -> MeasureOnD {
        let g = build_grid(&DomainSpec::unit_square(), n).unwrap();
        MeasureOnD::uniform(g)
    }

    #[test]
    fn phi_h_point_values() {
        let h = DensityCost::Quadratic;
        assert_abs_diff_eq!(phi_h_value(h, 1.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi_h_value(h, 2.0), 0.5, epsilon = 1e-15);
        let hl = DensityCost::LogBarrier;
        // phi_h(s) = s ln s + 1 - s
        assert_abs_diff_eq!(phi_h_value(hl, 1.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(phi_h_value(hl, 2.0), 2.0 * 2.0f64.ln() - 1.0, epsilon = 1e-12);
    }

    #[test]
    #[should_panic]
    fn phi_h_rejects_nonpositive() {
        phi_h_value(DensityCost::Quadratic, 0.0);
    }

    #[test]
    fn eval_phi_uniform_and_violated() {
        let mu = uniform_measure(16);
        let inc = ImagePenalty::incompressible(0.05).unwrap();
        assert_eq!(eval_phi(&mu, &inc), 0.0);
        let ih = ImagePenalty::integral_h(DensityCost::Quadratic).unwrap();
        assert_abs_diff_eq!(eval_phi(&mu, &ih), 0.0, epsilon = 1e-12);

        // density 2 on half the cells
        let g = build_grid(&DomainSpec::interval(0.0, 1.0).unwrap(), 32).unwrap();
        let u = crate::domain::Field::from_fn(g.clone(), Rank::Vector(1), |p, out| {
            out[0] = 0.5 * p[0]
        });
        let mu2 = pushforward(&u, &g, 2).unwrap();
        assert!(eval_phi(&mu2, &inc).is_infinite());
    }

    #[test]
    fn conjugate_closed_forms() {
        // quadratic h: phi_h*(r) = 2 - 2 sqrt(1 - r) for r < 1
        let h = DensityCost::Quadratic;
        for r in [-3.0f64, -0.5, 0.0, 0.5, 0.9] {
            let exact = 2.0 - 2.0 * (1.0 - r).sqrt();
            assert_abs_diff_eq!(phi_h_conjugate(h, r), exact, epsilon = 1e-8);
        }
        assert!(phi_h_conjugate(h, 1.0).is_infinite());
        // omega = 0: -min phi_h = 0
        assert_abs_diff_eq!(phi_h_conjugate(h, 0.0), 0.0, epsilon = 1e-10);
        // log barrier: phi_h(s) = s ln s + 1 - s, phi_h*(r) = e^r - 1
        let hl = DensityCost::LogBarrier;
        for r in [-2.0f64, 0.0, 1.5, 4.0] {
            assert_abs_diff_eq!(phi_h_conjugate(hl, r), r.exp() - 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn phi_star_incompressible_is_integral() {
        let g = build_grid(&DomainSpec::unit_square(), 16).unwrap();
        let inc = ImagePenalty::incompressible(0.05).unwrap();
        let zero = Field::zeros(g.clone(), Rank::Scalar);
        assert_abs_diff_eq!(phi_star(&zero, &inc).unwrap().value, 0.0, epsilon = 1e-15);
        let c = Field::scalar_from_fn(g.clone(), |_| 2.5);
        // |D| = 1
        assert_abs_diff_eq!(phi_star(&c, &inc).unwrap().value, 2.5, epsilon = 1e-9);
    }

    #[test]
    fn phi_star_flags_unbounded() {
        let g = build_grid(&DomainSpec::unit_square(), 8).unwrap();
        let ih = ImagePenalty::integral_h(DensityCost::Quadratic).unwrap();
        let omega = Field::scalar_from_fn(g.clone(), |_| 2.0);
        let v = phi_star(&omega, &ih).unwrap();
        assert!(v.unbounded && v.value.is_infinite());
    }

    #[test]
    fn pressure_of_uniform_density_vanishes() {
        let mu = uniform_measure(12);
        let ih = ImagePenalty::integral_h(DensityCost::Quadratic).unwrap();
        let omega = subdifferential_pressure(&mu, &ih).unwrap();
        assert!(omega.max_abs() < 1e-12);
        let inc = ImagePenalty::incompressible(0.05).unwrap();
        assert!(matches!(
            subdifferential_pressure(&mu, &inc),
            Err(CoreError::PressureUndetermined)
        ));
    }

    #[test]
    fn pressure_of_constant_density_is_constant() {
        let g = build_grid(&DomainSpec::unit_square(), 12).unwrap();
        let s0 = 1.7;
        let masses: Vec<f64> = g.volumes.iter().map(|v| v * s0).collect();
        let total_mass = crate::numeric::pairwise_sum(&masses);
        let mu = MeasureOnD {
            grid: Arc::clone(&g),
            masses,
            ref_volumes: g.volumes.clone(),
            total_mass,
        };
        let ih = ImagePenalty::integral_h(DensityCost::Quadratic).unwrap();
        let omega = subdifferential_pressure(&mu, &ih).unwrap();
        let expect = phi_h_prime(DensityCost::Quadratic, s0);
        for &i in &g.in_nodes {
            assert_abs_diff_eq!(omega.values[i as usize], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn analytic_derivative_matches_difference_quotient() {
        for h in [DensityCost::Quadratic, DensityCost::LogBarrier] {
            for s in [0.3, 1.0, 2.5, 7.0] {
                let eps = 1e-6 * s;
                let numeric = (phi_h_value(h, s + eps) - phi_h_value(h, s - eps)) / (2.0 * eps);
                assert_abs_diff_eq!(phi_h_prime(h, s), numeric, epsilon = 1e-6);
            }
        }
    }

    proptest! {
        // Fenchel-Young: phi_h(s) + phi_h*(r) >= r s, equality at r = phi_h'(s)
        #[test]
        fn fenchel_young(log_s in -4.6f64..4.6, r_off in 0.01f64..3.0) {
            for h in [DensityCost::Quadratic, DensityCost::LogBarrier] {
                let s = log_s.exp();
                let r_eq = phi_h_prime(h, s);
                let gap_eq = phi_h_value(h, s) + phi_h_conjugate(h, r_eq) - r_eq * s;
                prop_assert!(gap_eq.abs() <= 1e-8, "equality gap {gap_eq} at s={s}");
                let r = r_eq - r_off;
                let gap = phi_h_value(h, s) + phi_h_conjugate(h, r) - r * s;
                prop_assert!(gap >= -1e-9, "FY violated: {gap}");
            }
        }
    }
}
