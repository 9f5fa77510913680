//! Deterministic reductions and small numerical kernels.
//!
//! All sums that feed reported quantities go through the fixed-order pairwise
//! tree below so results do not depend on the number of worker threads.

use rayon::prelude::*;

/// Chunk width for parallel reductions. Fixed so the reduction tree is
/// identical for every thread count.
pub const REDUCE_CHUNK: usize = 4096;

/// Pairwise (cascade) summation of a slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Parallel deterministic sum: fixed-size chunks are reduced independently
/// and the per-chunk results are combined pairwise in chunk order.
pub fn par_sum(xs: &[f64]) -> f64 {
    if xs.len() <= REDUCE_CHUNK {
        return pairwise_sum(xs);
    }
    let partial: Vec<f64> = xs.par_chunks(REDUCE_CHUNK).map(pairwise_sum).collect();
    pairwise_sum(&partial)
}

/// Deterministic sum of `f(i)` for `i in 0..n`, parallel over fixed chunks.
pub fn par_sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    if n == 0 {
        return 0.0;
    }
    let nchunks = n.div_ceil(REDUCE_CHUNK);
    let partial: Vec<f64> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            let terms: Vec<f64> = (lo..hi).map(&f).collect();
            pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&partial)
}

/// Deterministic dot product with the same chunked pairwise tree.
pub fn par_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    if n <= REDUCE_CHUNK {
        let terms: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        return pairwise_sum(&terms);
    }
    let nchunks = n.div_ceil(REDUCE_CHUNK);
    let partial: Vec<f64> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            let terms: Vec<f64> = (lo..hi).map(|i| a[i] * b[i]).collect();
            pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&partial)
}

/// Parallel max of `f(i)`; max is order independent so a plain reduce is fine.
pub fn par_max_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .map(f)
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Parallel min of `f(i)`.
pub fn par_min_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .map(f)
        .reduce(|| f64::INFINITY, f64::min)
}

/// Smallest eigenvalue of a symmetric k x k matrix, k <= 3, row-major storage.
pub fn smallest_symmetric_eigenvalue(k: usize, m: &[f64]) -> f64 {
    match k {
        1 => m[0],
        2 => {
            let (a, b, c) = (m[0], m[1], m[3]);
            let tr = a + c;
            let disc = ((a - c) * 0.5).hypot(b);
            0.5 * tr - disc
        }
        3 => sym3_eigenvalues(m)[0],
        _ => panic!("smallest_symmetric_eigenvalue supports k <= 3, got {k}"),
    }
}

/// Eigenvalues of a symmetric 3x3 matrix in ascending order, by cyclic
/// Jacobi sweeps (quadratic convergence, machine-precision also at repeated
/// eigenvalues where closed-form methods lose half the digits).
pub fn sym3_eigenvalues(m: &[f64]) -> [f64; 3] {
    let mut a = [
        [m[0], m[1], m[2]],
        [m[3], m[4], m[5]],
        [m[6], m[7], m[8]],
    ];
    for _sweep in 0..24 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let scale = a[0][0].abs().max(a[1][1].abs()).max(a[2][2].abs()).max(1e-300);
        if off.sqrt() <= 1e-16 * scale {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let rotate = |a: &mut [[f64; 3]; 3], i: usize, j: usize| {
                for r in 0..3 {
                    let (ari, arj) = (a[r][i], a[r][j]);
                    a[r][i] = c * ari - s * arj;
                    a[r][j] = s * ari + c * arj;
                }
                for col in 0..3 {
                    let (aic, ajc) = (a[i][col], a[j][col]);
                    a[i][col] = c * aic - s * ajc;
                    a[j][col] = s * aic + c * ajc;
                }
            };
            rotate(&mut a, p, q);
        }
    }
    let mut d = [a[0][0], a[1][1], a[2][2]];
    d.sort_by(f64::total_cmp);
    d
}

/// Bessel function J0 (Abramowitz & Stegun 9.4.1 / 9.4.3, abs err < 1e-7).
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 3.0 {
        let t = (x / 3.0) * (x / 3.0);
        1.0 + t * (-2.2499997
            + t * (1.2656208
                + t * (-0.3163866 + t * (0.0444479 + t * (-0.0039444 + t * 0.0002100)))))
    } else {
        let t = 3.0 / ax;
        let f0 = 0.79788456
            + t * (-0.00000077
                + t * (-0.00552740
                    + t * (-0.00009512
                        + t * (0.00137237 + t * (-0.00072805 + t * 0.00014476)))));
        let th = ax - 0.78539816
            + t * (-0.04166397
                + t * (-0.00003954
                    + t * (0.00262573
                        + t * (-0.00054125 + t * (-0.00029333 + t * 0.00013558)))));
        f0 * th.cos() / ax.sqrt()
    }
}

/// Bessel function J1 (Abramowitz & Stegun 9.4.4 / 9.4.6, abs err < 1e-7).
pub fn bessel_j1(x: f64) -> f64 {
    let ax = x.abs();
    let val = if ax <= 3.0 {
        let t = (ax / 3.0) * (ax / 3.0);
        ax * (0.5
            + t * (-0.56249985
                + t * (0.21093573
                    + t * (-0.03954289
                        + t * (0.00443319 + t * (-0.00031761 + t * 0.00001109))))))
    } else {
        let t = 3.0 / ax;
        let f1 = 0.79788456
            + t * (0.00000156
                + t * (0.01659667
                    + t * (0.00017105
                        + t * (-0.00249511 + t * (0.00113653 - t * 0.00020033)))));
        let th = ax - 2.35619449
            + t * (0.12499612
                + t * (0.00005650
                    + t * (-0.00637879
                        + t * (0.00074348 + t * (0.00079824 - t * 0.00029166)))));
        f1 * th.cos() / ax.sqrt()
    };
    if x < 0.0 {
        -val
    } else {
        val
    }
}

/// First positive zero of J0.
pub const BESSEL_J0_ZERO1: f64 = 2.404825557695773;

/// First positive zero of J_{d/2-1} for d = 1, 2, 3; enters the eigenvalue of
/// a ball via lambda1(B_r) = j^2 / r^2.
pub fn bessel_first_zero_half_order(d: usize) -> f64 {
    match d {
        1 => std::f64::consts::FRAC_PI_2, // J_{-1/2} ~ cos
        2 => BESSEL_J0_ZERO1,
        3 => std::f64::consts::PI, // J_{1/2} ~ sin
        _ => panic!("ball eigenvalue constants available for d <= 3, got {d}"),
    }
}

/// Root of a monotone increasing function on [lo, hi] by bisection.
/// Assumes f(lo) <= 0 <= f(hi); returns the midpoint at relative tolerance.
pub fn bisect_increasing<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, rel_tol: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= rel_tol * hi.abs().max(lo.abs()).max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pairwise_matches_naive() {
        let xs: Vec<f64> = (0..10_000).map(|i| ((i * 37 % 101) as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert_abs_diff_eq!(pairwise_sum(&xs), naive, epsilon = 1e-9);
        assert_abs_diff_eq!(par_sum(&xs), naive, epsilon = 1e-9);
    }

    #[test]
    fn par_sum_indexed_is_thread_count_independent() {
        let f = |i: usize| ((i as f64) * 0.7).cos();
        let a = par_sum_indexed(50_000, f);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| par_sum_indexed(50_000, f));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn sym3_diagonal_and_rotated() {
        let d = sym3_eigenvalues(&[3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0]);
        assert_abs_diff_eq!(d[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[2], 3.0, epsilon = 1e-12);
        // A = R diag(1,2,5) R^T for a Givens rotation in the (0,1) plane
        let (c, s) = (0.6, 0.8);
        let (l0, l1, l2) = (1.0, 2.0, 5.0);
        let m = [
            c * c * l0 + s * s * l1,
            c * s * (l1 - l0),
            0.0,
            c * s * (l1 - l0),
            s * s * l0 + c * c * l1,
            0.0,
            0.0,
            0.0,
            l2,
        ];
        let e = sym3_eigenvalues(&m);
        assert_abs_diff_eq!(e[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e[1], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e[2], 5.0, epsilon = 1e-10);
    }

    #[test]
    fn smallest_eig_2x2() {
        let m = [2.0, 1.0, 1.0, 2.0];
        assert_abs_diff_eq!(smallest_symmetric_eigenvalue(2, &m), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bessel_values() {
        assert_abs_diff_eq!(bessel_j0(0.0), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(bessel_j0(BESSEL_J0_ZERO1), 0.0, epsilon = 5e-7);
        assert_abs_diff_eq!(bessel_j0(5.0), -0.17759677131433830, epsilon = 5e-7);
        assert_abs_diff_eq!(bessel_j1(1.0), 0.44005058574493355, epsilon = 5e-7);
        assert_abs_diff_eq!(bessel_j1(5.0), -0.3275791375914652, epsilon = 5e-7);
    }

    #[test]
    fn bisection_finds_sqrt2() {
        let r = bisect_increasing(|x| x * x - 2.0, 0.0, 2.0, 1e-14);
        assert_abs_diff_eq!(r, std::f64::consts::SQRT_2, epsilon = 1e-12);
    }
}
