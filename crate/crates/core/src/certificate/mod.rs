//! Global-optimality certificates: the pressure's convexity modulus against
//! the first Dirichlet eigenvalue, the convex-pressure path, and the local
//! optimality radius.

use crate::domain::{certified_lambda1, Field, NodeClass, Rank};
use crate::energy::{
    pushforward_for, subdifferential_pressure, ImagePenalty, ProblemSpec,
};
use crate::equilibrium::{el_residual, EquilibriumPair};
use crate::error::{CoreError, Result};
use crate::numeric::{bessel_first_zero_half_order, smallest_symmetric_eigenvalue};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Strict margin: the unique global minimizer.
    CertifiedUnique,
    /// Boundary case margin = 0 or convex pressure without strictness:
    /// a global minimizer.
    CertifiedMinimizer,
    Inconclusive,
}

/// Everything a verdict depends on, recorded for the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub lambda_hat: f64,
    pub lambda1: f64,
    pub lambda1_safety: f64,
    pub lambda_w: f64,
    pub lambda_f: f64,
    pub margin: f64,
    pub el_residual: f64,
    pub residual_tol: f64,
    pub verdict: Verdict,
    /// Independent convex-pressure route: lambda_hat >= 0 plus a strictly
    /// convex ingredient certifies without the eigenvalue.
    pub convex_pressure_path: bool,
    pub subdiff_deviation: Option<f64>,
    pub density_tv_deviation: Option<f64>,
    pub reasons: Vec<String>,
    pub grid_resolution: usize,
    pub grid_h: f64,
    /// The modulus is estimated on the target grid only; extendability to a
    /// lambda-convex function on all of R^k is not checked numerically.
    pub modulus_caveat: String,
}

/// Options controlling the certificate tolerances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyOptions {
    /// None: 10 h^2 (second-order discretization of gallery pairs).
    pub residual_tol: Option<f64>,
    /// Max allowed sup deviation between omega and phi_h'(density).
    pub subdiff_tol: f64,
    pub eigen_tol: f64,
    pub basis_size: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            residual_tol: None,
            subdiff_tol: 0.1,
            eigen_tol: 1e-9,
            basis_size: 4,
        }
    }
}

/// Minimum over interior nodes of the smallest eigenvalue of the
/// second-difference Hessian of omega. Quadratics are reproduced exactly.
pub fn lambda_convexity_modulus(omega: &Field) -> Result<f64> {
    if omega.rank != Rank::Scalar {
        return Err(CoreError::RankMismatch {
            op: "lambda_convexity_modulus",
            expected: "scalar",
            got: omega.rank.to_string(),
        });
    }
    let grid = &omega.grid;
    let k = grid.dim();
    if grid.npts.iter().take(k).any(|&n| n < 3) {
        return Err(CoreError::TooCoarse("need at least 3 nodes per axis".into()));
    }
    let mut min_eig = f64::INFINITY;
    let mut usable = 0usize;
    let mut hess = vec![0.0; k * k];
    for &idx32 in &grid.interior_nodes {
        let idx = idx32 as usize;
        // all stencil nodes (axis neighbors and axis-pair diagonals) must be
        // non-exterior
        let mut ok = true;
        for a in 0..k {
            for da in [-1isize, 1] {
                match grid.neighbor(idx, a, da) {
                    Some(nb) if grid.class[nb] != NodeClass::Exterior => {}
                    _ => {
                        ok = false;
                    }
                }
            }
        }
        if ok {
            'pairs: for a in 0..k {
                for b in (a + 1)..k {
                    for (da, db) in [(1isize, 1isize), (1, -1), (-1, 1), (-1, -1)] {
                        let nb = grid
                            .neighbor(idx, a, da)
                            .and_then(|m| grid.neighbor(m, b, db));
                        match nb {
                            Some(m) if grid.class[m] != NodeClass::Exterior => {}
                            _ => {
                                ok = false;
                                break 'pairs;
                            }
                        }
                    }
                }
            }
        }
        if !ok {
            continue;
        }
        usable += 1;
        let w = |node: usize| omega.values[node];
        for a in 0..k {
            let ha = grid.spacing[a];
            let plus = grid.neighbor(idx, a, 1).unwrap();
            let minus = grid.neighbor(idx, a, -1).unwrap();
            hess[a * k + a] = (w(plus) - 2.0 * w(idx) + w(minus)) / (ha * ha);
            for b in (a + 1)..k {
                let hb = grid.spacing[b];
                let pp = grid.neighbor(idx, a, 1).and_then(|m| grid.neighbor(m, b, 1)).unwrap();
                let pm = grid.neighbor(idx, a, 1).and_then(|m| grid.neighbor(m, b, -1)).unwrap();
                let mp = grid.neighbor(idx, a, -1).and_then(|m| grid.neighbor(m, b, 1)).unwrap();
                let mm = grid.neighbor(idx, a, -1).and_then(|m| grid.neighbor(m, b, -1)).unwrap();
                let mixed = (w(pp) - w(pm) - w(mp) + w(mm)) / (4.0 * ha * hb);
                hess[a * k + b] = mixed;
                hess[b * k + a] = mixed;
            }
        }
        min_eig = min_eig.min(smallest_symmetric_eigenvalue(k, &hess));
    }
    if usable == 0 {
        return Err(CoreError::TooCoarse(
            "no interior node carries a full Hessian stencil".into(),
        ));
    }
    Ok(min_eig)
}

/// Certify an equilibrium pair: Euler-Lagrange residual, subdifferential
/// membership where determinable, then the convex-pressure route and the
/// eigenvalue route.
pub fn certify(pair: &EquilibriumPair, spec: &ProblemSpec, opts: &CertifyOptions) -> Result<CertificateReport> {
    let grid = &spec.grid_omega;
    let h = grid.h;
    let residual_tol = opts.residual_tol.unwrap_or(10.0 * h * h);
    let mut reasons = Vec::new();

    let lambda_hat = lambda_convexity_modulus(&pair.omega)?;
    let lambda_w = spec.lambda_w();
    let lambda_f = spec.lambda_f();

    let el = el_residual(pair, spec, opts.basis_size)?;
    let mut residual_ok = el <= residual_tol;
    if !residual_ok {
        reasons.push(format!(
            "basis-restricted Euler-Lagrange residual {el:.3e} above tolerance {residual_tol:.3e}"
        ));
    }

    // Subdifferential membership of the pressure.
    let mut subdiff_deviation = None;
    let mut density_tv_deviation = None;
    match &spec.penalty {
        ImagePenalty::Incompressible { density_tol } => {
            let mu = pushforward_for(spec, &pair.u)?;
            let tv = mu.tv_uniform_deviation();
            density_tv_deviation = Some(tv);
            if tv > *density_tol {
                residual_ok = false;
                reasons.push(format!(
                    "image measure deviates from uniform by {tv:.3e} (tolerance {density_tol:.3e}); any continuous pressure is admissible only at the uniform measure"
                ));
            }
        }
        ImagePenalty::IntegralH { .. } => {
            let mu = pushforward_for(spec, &pair.u)?;
            let pressure = subdifferential_pressure(&mu, &spec.penalty)?;
            let mut dev = 0.0f64;
            for &idx32 in &spec.grid_target.interior_nodes {
                let idx = idx32 as usize;
                if mu.ref_volumes[idx] > 0.0 {
                    dev = dev.max((pair.omega.values[idx] - pressure.values[idx]).abs());
                }
            }
            subdiff_deviation = Some(dev);
            if dev > opts.subdiff_tol {
                residual_ok = false;
                reasons.push(format!(
                    "pressure deviates from phi_h'(density) by {dev:.3e} (tolerance {:.3e})",
                    opts.subdiff_tol
                ));
            }
        }
    }

    // Theorem paths.
    let eig = certified_lambda1(grid, opts.eigen_tol)?;
    let lambda1 = eig.certified;
    let margin = lambda_hat + lambda_w * lambda1 + lambda_f;

    let strict_ingredient = lambda_hat > 0.0
        || spec.stored_energy.strictly_convex()
        || spec.potential.strictly_convex();
    let convex_pressure_path = lambda_hat >= 0.0;

    let verdict = if !residual_ok {
        Verdict::Inconclusive
    } else if margin > 0.0 || (convex_pressure_path && strict_ingredient) {
        Verdict::CertifiedUnique
    } else if margin >= 0.0 || convex_pressure_path {
        Verdict::CertifiedMinimizer
    } else {
        reasons.push(format!(
            "margin {margin:.6} = lambda_hat {lambda_hat:.6} + lambda_W {lambda_w:.3} x lambda1 {lambda1:.6} + lambda_F {lambda_f:.3} is negative and the pressure is not convex"
        ));
        Verdict::Inconclusive
    };

    Ok(CertificateReport {
        lambda_hat,
        lambda1,
        lambda1_safety: eig.margin,
        lambda_w,
        lambda_f,
        margin,
        el_residual: el,
        residual_tol,
        verdict,
        convex_pressure_path,
        subdiff_deviation,
        density_tv_deviation,
        reasons,
        grid_resolution: grid.resolution[0],
        grid_h: h,
        modulus_caveat: "convexity modulus estimated on the closed target grid at grid scale; extendability beyond the target is not verified".into(),
    })
}

/// Largest diameter r for which lambda_hat + lambda_W lambda1(ball of
/// diameter r) + lambda_F stays positive, using the ball lower bound
/// lambda1 = 4 j^2 / r^2 with the half-integer Bessel zero for the grid
/// dimension. Infinite when the zeroth-order part is already nonnegative.
pub fn local_radius(lambda_hat: f64, lambda_f: f64, lambda_w: f64, dim: usize) -> Result<f64> {
    if !(lambda_w > 0.0) {
        return Err(CoreError::PreconditionViolated(format!(
            "local radius needs lambda_W > 0, got {lambda_w}"
        )));
    }
    if !lambda_hat.is_finite() {
        return Err(CoreError::PreconditionViolated("lambda_hat must be finite".into()));
    }
    if lambda_hat + lambda_f >= 0.0 {
        return Ok(f64::INFINITY);
    }
    let j = bessel_first_zero_half_order(dim);
    Ok(2.0 * j * (lambda_w / -(lambda_hat + lambda_f)).sqrt())
}
