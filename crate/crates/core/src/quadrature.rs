//! Gauss-Hermite rules.

use crate::error::{Error, Result};

/// Nodes and weights for `int f(x) exp(-x^2) dx`, nodes in decreasing
/// order. Newton iteration on the orthonormal Hermite recurrence with
/// running rescaling; a Sturm count on the Jacobi matrix checks that each
/// Newton limit is the intended root and brackets it by bisection when not.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Usage("Gauss-Hermite rule needs at least one node".into()));
    }
    let nf = n as f64;
    let m = n.div_ceil(2);
    let edge = (2.0 * nf + 1.0).sqrt() + 1.0;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let upper = if i == 0 { edge } else { x[i - 1] };
        // Root i has exactly n - 1 - i roots below it.
        let below = n - 1 - i;
        let is_target = |r: f64| {
            let delta = 1e-9 * r.abs().max(1.0);
            r < upper && count_below(n, r - delta) == below && count_below(n, r + delta) == below + 1
        };
        let newton = newton_root(n, z).filter(|r| is_target(*r));
        z = match newton {
            Some(r) => r,
            None => {
                let (mut lo, mut hi) = (-edge, upper);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if count_below(n, mid) > below {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo <= 1e-9 * hi.abs().max(1.0) {
                        break;
                    }
                }
                newton_root(n, 0.5 * (lo + hi))
                    .filter(|r| is_target(*r))
                    .ok_or_else(|| Error::Numerical(format!("Gauss-Hermite node {i} of {n} did not converge")))?
            }
        };
        let (_, pp, log_scale) = hermite_pair(n, z);
        x[i] = z;
        x[n - 1 - i] = -z;
        // w = 2 / pp^2 with pp carrying exp(log_scale).
        let weight = (2f64.ln() - 2.0 * (pp.abs().ln() + log_scale)).exp();
        w[i] = weight;
        w[n - 1 - i] = weight;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    Ok((x, w))
}

/// Orthonormal `p_n(z)`, `p_n'(z)` and the log of the scale removed from both.
fn hermite_pair(n: usize, z: f64) -> (f64, f64, f64) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^{-1/4}
    const RESCALE: f64 = 1e150;
    let mut p1 = PIM4;
    let mut p2 = 0.0;
    let mut log_scale = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        if p1.abs() > RESCALE {
            p1 /= RESCALE;
            p2 /= RESCALE;
            log_scale += RESCALE.ln();
        }
    }
    (p1, (2.0 * n as f64).sqrt() * p2, log_scale)
}

fn newton_root(n: usize, mut z: f64) -> Option<f64> {
    for _ in 0..100 {
        let (p, dp, _) = hermite_pair(n, z);
        let dz = p / dp;
        z -= dz;
        if !z.is_finite() {
            return None;
        }
        if dz.abs() <= 1e-15 * z.abs().max(1.0) {
            return Some(z);
        }
    }
    None
}

/// Number of roots of `H_n` below `z` (Sturm count of the Jacobi matrix).
fn count_below(n: usize, z: f64) -> usize {
    let mut count = 0;
    let mut q = -z;
    if q < 0.0 {
        count += 1;
    }
    for j in 1..n {
        let denom = if q == 0.0 { f64::MIN_POSITIVE } else { q };
        q = -z - 0.5 * j as f64 / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Rule for `E f(N)` with `N` standard normal.
pub fn normal_rule(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (x, w) = gauss_hermite(n)?;
    let s = std::f64::consts::PI.sqrt();
    Ok((
        x.into_iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
        w.into_iter().map(|v| v / s).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_order_rules_exact() {
        let (x, w) = normal_rule(3).unwrap();
        let m = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-14);
        assert!((m(2) - 1.0).abs() < 1e-14);
        assert!((m(4) - 3.0).abs() < 1e-13);
        assert!(x[1].abs() < 1e-15);
    }

    #[test]
    fn moments_for_many_sizes() {
        for n in [1, 2, 5, 20, 64, 256, 1024, 4096] {
            let (x, w) = normal_rule(n).unwrap();
            let m0: f64 = w.iter().sum();
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            assert!((m0 - 1.0).abs() < 1e-12, "n={n} m0={m0}");
            if n > 1 {
                assert!((m2 - 1.0).abs() < 1e-10, "n={n} m2={m2}");
            }
            assert!(x.windows(2).all(|p| p[0] > p[1]), "n={n} {:?}", &x[..x.len().min(6)]);
        }
    }
}
