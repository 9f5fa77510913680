//! Generalized continuity equation residual against a fixed C^1 family of
//! product test fields.

use super::PlanFlux;
use crate::energy::ProblemSpec;
use crate::error::Result;
use crate::numeric::pairwise_sum;
use rayon::prelude::*;

/// One-axis factor of a product test mode: 1, t, sin(pi t), cos(pi t),
/// sin(2 pi t), cos(2 pi t), ... in the normalized coordinate of the axis.
#[derive(Debug, Clone, Copy)]
struct AxisFactor {
    kind: usize,
    origin: f64,
    length: f64,
}

impl AxisFactor {
    fn value(&self, x: f64) -> f64 {
        let t = (x - self.origin) / self.length;
        match self.kind {
            0 => 1.0,
            1 => t,
            k => {
                let m = (k / 2) as f64 * std::f64::consts::PI;
                if k % 2 == 0 {
                    (m * t).sin()
                } else {
                    (m * t).cos()
                }
            }
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        let t = (x - self.origin) / self.length;
        match self.kind {
            0 => 0.0,
            1 => 1.0 / self.length,
            k => {
                let m = (k / 2) as f64 * std::f64::consts::PI;
                if k % 2 == 0 {
                    m / self.length * (m * t).cos()
                } else {
                    -m / self.length * (m * t).sin()
                }
            }
        }
    }

    fn derivative_bound(&self) -> f64 {
        match self.kind {
            0 => 0.0,
            1 => 1.0 / self.length,
            k => (k / 2) as f64 * std::f64::consts::PI / self.length,
        }
    }
}

/// A product mode phi(x, y) = P(x) Q(y) e_i.
#[derive(Debug, Clone)]
pub(crate) struct ProductMode {
    x_factors: Vec<AxisFactor>,
    y_factors: Vec<AxisFactor>,
    pub component: usize,
    /// 1 / (1 + sup |grad_Omega phi| + sup |grad_D phi|).
    scale: f64,
}

impl ProductMode {
    pub fn p_value(&self, x: &[f64]) -> f64 {
        self.x_factors.iter().zip(x).map(|(f, &v)| f.value(v)).product()
    }

    pub fn q_value(&self, y: &[f64]) -> f64 {
        self.y_factors.iter().zip(y).map(|(f, &v)| f.value(v)).product()
    }

    fn p_derivative(&self, x: &[f64], axis: usize) -> f64 {
        let mut v = 1.0;
        for (a, f) in self.x_factors.iter().enumerate() {
            v *= if a == axis { f.derivative(x[a]) } else { f.value(x[a]) };
        }
        v
    }

    fn q_derivative(&self, y: &[f64], axis: usize) -> f64 {
        let mut v = 1.0;
        for (a, f) in self.y_factors.iter().enumerate() {
            v *= if a == axis { f.derivative(y[a]) } else { f.value(y[a]) };
        }
        v
    }
}

pub(crate) fn product_modes(spec: &ProblemSpec, per_axis: usize) -> Vec<ProductMode> {
    let d = spec.grid_omega.dim();
    let k = spec.grid_target.dim();
    let (ox, lx) = spec.grid_omega.spec.bounding_box();
    let (oy, ly) = spec.grid_target.spec.bounding_box();
    let mut modes = Vec::new();
    let mut xk = vec![0usize; d];
    loop {
        let mut yk = vec![0usize; k];
        loop {
            for component in 0..d {
                let x_factors: Vec<AxisFactor> = (0..d)
                    .map(|a| AxisFactor { kind: xk[a], origin: ox[a], length: lx[a] })
                    .collect();
                let y_factors: Vec<AxisFactor> = (0..k)
                    .map(|a| AxisFactor { kind: yk[a], origin: oy[a], length: ly[a] })
                    .collect();
                let grad_x_bound: f64 = (0..d)
                    .map(|a| x_factors[a].derivative_bound())
                    .sum();
                let grad_y_bound: f64 = (0..k)
                    .map(|a| y_factors[a].derivative_bound())
                    .sum();
                let scale = 1.0 / (1.0 + grad_x_bound + grad_y_bound);
                modes.push(ProductMode { x_factors, y_factors, component, scale });
            }
            if !advance(&mut yk, per_axis) {
                break;
            }
        }
        if !advance(&mut xk, per_axis) {
            break;
        }
    }
    modes
}

fn advance(idx: &mut [usize], cap: usize) -> bool {
    for v in idx.iter_mut() {
        *v += 1;
        if *v < cap {
            return true;
        }
        *v = 0;
    }
    false
}

/// Max over the mode family of the normalized continuity-equation pairing:
/// integral of div_x phi against pi plus grad_y phi against J minus the
/// boundary pairing with the boundary map.
pub fn continuity_residual(pf: &PlanFlux, spec: &ProblemSpec, basis_size: usize) -> Result<f64> {
    pf.validate()?;
    let product = &pf.product;
    let grid = &product.omega;
    let grid_d = &product.target;
    let d = grid.dim();
    let k = grid_d.dim();
    let modes = product_modes(spec, basis_size);
    // Collect the support once to avoid re-walking sparse storage per mode.
    let mut cells: Vec<(u32, u32, f64)> = Vec::new();
    let kd = product.kd();
    let mut fluxes: Vec<f64> = Vec::new();
    pf.for_each_cell(|a, b, m, fl| {
        cells.push((a as u32, b as u32, m));
        fluxes.extend_from_slice(fl);
    });
    let residual = modes
        .par_iter()
        .map(|mode| {
            let i = mode.component;
            let terms: Vec<f64> = cells
                .iter()
                .enumerate()
                .map(|(e, &(a, b, mass))| {
                    let x3 = grid.node_position(product.omega_active[a as usize] as usize);
                    let y3 = grid_d.node_position(product.target_active[b as usize] as usize);
                    let x = &x3[..d];
                    let y = &y3[..k];
                    // div_x of P(x) Q(y) e_i = dP/dx_i Q
                    let div = mode.p_derivative(x, i) * mode.q_value(y);
                    // grad_y phi : J picks component row i of J against grad Q
                    let p = mode.p_value(x);
                    let mut contraction = 0.0;
                    for c in 0..k {
                        contraction +=
                            p * mode.q_derivative(y, c) * fluxes[e * kd + c * d + i];
                    }
                    div * mass + contraction
                })
                .collect();
            let volume_part = pairwise_sum(&terms);
            // boundary pairing
            let bterms: Vec<f64> = grid
                .surface
                .iter()
                .map(|el| {
                    let g = spec.boundary_value(el.node).expect("boundary value");
                    let px = mode.p_value(&el.position[..d]);
                    let qv = mode.q_value(&g[..k]);
                    el.weight * px * qv * el.normal[i]
                })
                .collect();
            let boundary_part = pairwise_sum(&bterms);
            (volume_part - boundary_part).abs() * mode.scale
        })
        .reduce(|| 0.0, f64::max);
    Ok(residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec, Field, Rank};
    use crate::energy::{ImagePenalty, MeasureOnD, PotentialSpec, StoredEnergySpec};
    use crate::relaxation::{lift, PlanStorage, ProductGrid};

    fn problem(n: usize) -> (ProblemSpec, Field) {
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
    fn lift_of_identity_satisfies_continuity() {
        for n in [16usize, 32] {
            let (spec, u) = problem(n);
            let pf = lift(&u, &spec).unwrap();
            let r = continuity_residual(&pf, &spec, 4).unwrap();
            let h = spec.grid_omega.h;
            assert!(r <= 2.0 * h, "n={n}: residual {r} vs h {h}");
        }
    }

    #[test]
    fn lift_of_affine_satisfies_continuity() {
        let n = 24;
        let g = build_grid(&DomainSpec::unit_square(), n).unwrap();
        let (s1, s2) = (1.15, 1.0 / 1.15);
        let target = DomainSpec::new(crate::domain::Shape::Box {
            origin: vec![0.0, 0.0],
            lengths: vec![s1, s2],
        })
        .unwrap();
        let gt = build_grid(&target, n).unwrap();
        let u = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
            out[0] = s1 * p[0];
            out[1] = s2 * p[1];
        });
        let spec = ProblemSpec::new(
            g,
            gt,
            ProblemSpec::boundary_from_field(&u),
            StoredEnergySpec::Quadratic,
            PotentialSpec::Zero,
            ImagePenalty::incompressible(0.05).unwrap(),
            2,
        )
        .unwrap();
        let pf = lift(&u, &spec).unwrap();
        let r = continuity_residual(&pf, &spec, 4).unwrap();
        assert!(r <= 2.0 * spec.grid_omega.h, "residual {r}");
    }

    #[test]
    fn flux_free_plan_with_boundary_data_violates_continuity() {
        let (spec, _) = problem(16);
        let product = ProductGrid::for_spec(&spec);
        // pi concentrated as x-dependent masses, J = 0, identity boundary map
        let na = product.omega_active.len();
        let nb = product.target_active.len();
        let mut pi = vec![0.0; na * nb];
        let grid = &product.omega;
        for (a, &lattice) in product.omega_active.iter().enumerate() {
            let x = grid.node_position(lattice as usize);
            let weight = grid.volumes[lattice as usize] * (1.0 + 0.9 * x[0]);
            // put everything in one target cell per row
            pi[a * nb + (a % nb)] = weight;
        }
        let flux = vec![0.0; na * nb * product.kd()];
        let mut mu_masses = vec![0.0; product.target.node_count];
        for (a, &row_lattice) in product.omega_active.iter().enumerate() {
            let _ = row_lattice;
            let b = a % nb;
            mu_masses[product.target_active[b] as usize] += pi[a * nb + b];
        }
        let total_mass = mu_masses.iter().sum();
        let pf = crate::relaxation::PlanFlux {
            product: product.clone(),
            storage: PlanStorage::Dense { pi, flux },
            omega_ref: product
                .omega_active
                .iter()
                .map(|&l| product.omega.volumes[l as usize])
                .collect(),
            mu: MeasureOnD {
                grid: product.target.clone(),
                masses: mu_masses,
                ref_volumes: product.target.volumes.clone(),
                total_mass,
            },
        };
        let r = continuity_residual(&pf, &spec, 4).unwrap();
        assert!(r > 0.1, "expected a visible violation, got {r}");
    }
}
