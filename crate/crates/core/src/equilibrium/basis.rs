//! Fixed test-function families vanishing on the domain boundary: tensor
//! sine modes on boxes, polynomial-bump times cosine modes on masked shapes.
//! Deterministic, with analytic gradients.

use crate::domain::{Grid, Shape};
use crate::numeric::pairwise_sum;

#[derive(Debug, Clone)]
pub struct TestMode {
    index: [usize; 3],
    shape: ModeShape,
    /// 1 / W^{1,p} norm, filled by the basis constructor.
    scale: f64,
}

#[derive(Debug, Clone)]
enum ModeShape {
    /// Product of sin(k_a pi t_a) over a box.
    BoxSine { origin: [f64; 3], lengths: [f64; 3], dim: usize },
    /// (1 - |x-c|^2/R^2) (outer) times (|x-c|^2/r^2 - 1) (if annular) times
    /// cosine modes on the bounding box, times sin in z for cylinders.
    RadialBump {
        center: [f64; 2],
        inner: f64,
        outer: f64,
        origin: [f64; 3],
        lengths: [f64; 3],
        dim: usize,
        z_sine: bool,
    },
}

impl TestMode {
    pub fn value(&self, p: &[f64]) -> f64 {
        self.raw_value(p) * self.scale
    }

    pub fn gradient(&self, p: &[f64], out: &mut [f64]) {
        self.raw_gradient(p, out);
        for o in out.iter_mut() {
            *o *= self.scale;
        }
    }

    fn raw_value(&self, p: &[f64]) -> f64 {
        match &self.shape {
            ModeShape::BoxSine { origin, lengths, dim } => {
                let mut v = 1.0;
                for a in 0..*dim {
                    let t = (p[a] - origin[a]) / lengths[a];
                    v *= ((self.index[a] + 1) as f64 * std::f64::consts::PI * t).sin();
                }
                v
            }
            ModeShape::RadialBump { center, inner, outer, origin, lengths, dim, z_sine } => {
                let rr = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                let mut v = 1.0 - rr / (outer * outer);
                if *inner > 0.0 {
                    v *= rr / (inner * inner) - 1.0;
                }
                for a in 0..2 {
                    let t = (p[a] - origin[a]) / lengths[a];
                    v *= (self.index[a] as f64 * std::f64::consts::PI * t).cos();
                }
                if *dim == 3 {
                    let t = (p[2] - origin[2]) / lengths[2];
                    if *z_sine {
                        v *= ((self.index[2] + 1) as f64 * std::f64::consts::PI * t).sin();
                    }
                }
                v
            }
        }
    }

    fn raw_gradient(&self, p: &[f64], out: &mut [f64]) {
        match &self.shape {
            ModeShape::BoxSine { origin, lengths, dim } => {
                // product rule over the factors
                let mut vals = [0.0; 3];
                let mut ders = [0.0; 3];
                for a in 0..*dim {
                    let k = (self.index[a] + 1) as f64 * std::f64::consts::PI;
                    let t = (p[a] - origin[a]) / lengths[a];
                    vals[a] = (k * t).sin();
                    ders[a] = k / lengths[a] * (k * t).cos();
                }
                for a in 0..*dim {
                    let mut g = ders[a];
                    for b in 0..*dim {
                        if b != a {
                            g *= vals[b];
                        }
                    }
                    out[a] = g;
                }
            }
            ModeShape::RadialBump { center, inner, outer, origin, lengths, dim, z_sine } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let rr = dx * dx + dy * dy;
                let q_out = 1.0 - rr / (outer * outer);
                let gq_out = [-2.0 * dx / (outer * outer), -2.0 * dy / (outer * outer)];
                let (q, gq) = if *inner > 0.0 {
                    let q_in = rr / (inner * inner) - 1.0;
                    let gq_in = [2.0 * dx / (inner * inner), 2.0 * dy / (inner * inner)];
                    (
                        q_out * q_in,
                        [
                            gq_out[0] * q_in + q_out * gq_in[0],
                            gq_out[1] * q_in + q_out * gq_in[1],
                        ],
                    )
                } else {
                    (q_out, gq_out)
                };
                let mut cos_vals = [1.0; 2];
                let mut cos_ders = [0.0; 2];
                for a in 0..2 {
                    let k = self.index[a] as f64 * std::f64::consts::PI;
                    let t = (p[a] - origin[a]) / lengths[a];
                    cos_vals[a] = (k * t).cos();
                    cos_ders[a] = -k / lengths[a] * (k * t).sin();
                }
                let (zv, zd) = if *dim == 3 && *z_sine {
                    let k = (self.index[2] + 1) as f64 * std::f64::consts::PI;
                    let t = (p[2] - origin[2]) / lengths[2];
                    ((k * t).sin(), k / lengths[2] * (k * t).cos())
                } else {
                    (1.0, 0.0)
                };
                let trig = cos_vals[0] * cos_vals[1];
                out[0] = (gq[0] * trig + q * cos_ders[0] * cos_vals[1]) * zv;
                out[1] = (gq[1] * trig + q * cos_vals[0] * cos_ders[1]) * zv;
                if *dim == 3 {
                    out[2] = q * trig * zd;
                }
            }
        }
    }
}

/// A deterministic family of scalar modes vanishing on the boundary,
/// unit-normalized in the discrete W^{1,p} norm.
#[derive(Debug, Clone)]
pub struct TestBasis {
    pub modes: Vec<TestMode>,
}

impl TestBasis {
    pub fn for_grid(grid: &Grid, per_axis: usize, p_norm: f64) -> Self {
        let spec = &grid.spec;
        let d = grid.dim();
        let (origin, lengths) = spec.bounding_box();
        let mut o3 = [0.0; 3];
        let mut l3 = [1.0; 3];
        for a in 0..d {
            o3[a] = origin[a];
            l3[a] = lengths[a];
        }
        let shape = match &spec.shape {
            Shape::Box { .. } => ModeShape::BoxSine { origin: o3, lengths: l3, dim: d },
            Shape::Disk { center, radius } => ModeShape::RadialBump {
                center: *center,
                inner: 0.0,
                outer: *radius,
                origin: o3,
                lengths: l3,
                dim: d,
                z_sine: false,
            },
            Shape::Annulus { center, inner, outer } => ModeShape::RadialBump {
                center: *center,
                inner: *inner,
                outer: *outer,
                origin: o3,
                lengths: l3,
                dim: d,
                z_sine: false,
            },
            Shape::Cylinder { center, radius, .. } => ModeShape::RadialBump {
                center: *center,
                inner: 0.0,
                outer: *radius,
                origin: o3,
                lengths: l3,
                dim: d,
                z_sine: true,
            },
        };
        let mut modes = Vec::new();
        let mut index = [0usize; 3];
        let counts = [per_axis, if d > 1 { per_axis } else { 1 }, if d > 2 { per_axis } else { 1 }];
        loop {
            let mut mode = TestMode { index, shape: shape.clone(), scale: 1.0 };
            let norm = mode_norm(grid, &mode, p_norm);
            if norm > 0.0 {
                mode.scale = 1.0 / norm;
                modes.push(mode);
            }
            let mut a = 0;
            while a < 3 {
                index[a] += 1;
                if index[a] == counts[a] {
                    index[a] = 0;
                    a += 1;
                } else {
                    break;
                }
            }
            if a == 3 {
                break;
            }
        }
        TestBasis { modes }
    }
}

fn mode_norm(grid: &Grid, mode: &TestMode, p: f64) -> f64 {
    let d = grid.dim();
    let terms: Vec<f64> = grid
        .in_nodes
        .iter()
        .map(|&idx32| {
            let idx = idx32 as usize;
            let vol = grid.volumes[idx];
            if vol <= 0.0 {
                return 0.0;
            }
            let x = grid.node_position(idx);
            let v = mode.raw_value(&x[..d]);
            let mut g = [0.0; 3];
            mode.raw_gradient(&x[..d], &mut g);
            let gnorm = (0..d).map(|a| g[a] * g[a]).sum::<f64>().sqrt();
            (v.abs().powf(p) + gnorm.powf(p)) * vol
        })
        .collect();
    pairwise_sum(&terms).powf(1.0 / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec};

    #[test]
    fn modes_vanish_on_boundary() {
        for spec in [DomainSpec::unit_square(), DomainSpec::unit_disk(), DomainSpec::unit_cylinder()]
        {
            let grid = build_grid(&spec, 12).unwrap();
            let basis = TestBasis::for_grid(&grid, 2, 2.0);
            assert!(!basis.modes.is_empty());
            let d = grid.dim();
            for mode in &basis.modes {
                for e in &grid.surface {
                    let v = mode.value(&e.position[..d]);
                    assert!(
                        v.abs() < 1e-10,
                        "mode {:?} nonzero ({v}) at surface point {:?}",
                        mode.index,
                        e.position
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_differences() {
        let grid = build_grid(&DomainSpec::unit_disk(), 8).unwrap();
        let basis = TestBasis::for_grid(&grid, 3, 2.0);
        let mode = &basis.modes[4];
        let p = [0.21, -0.35];
        let mut g = [0.0; 3];
        mode.gradient(&p, &mut g);
        let eps = 1e-6;
        for a in 0..2 {
            let mut pp = p;
            let mut pm = p;
            pp[a] += eps;
            pm[a] -= eps;
            let fd = (mode.value(&pp) - mode.value(&pm)) / (2.0 * eps);
            assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {} vs {}", fd, g[a]);
        }
    }
}
