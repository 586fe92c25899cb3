//! Quadratic monomial basis over R^d.
//!
//! Ordering is `1, x_1..x_d, x_a x_b (a <= b)` with `a` outer. The same
//! ordering is used for regression designs and for fast evaluation of
//! quadratic forms as dot products.

/// Number of monomials of degree at most two in `d` variables.
pub fn basis_len(d: usize) -> usize {
    (d + 1) * (d + 2) / 2
}

/// Writes the monomials of `x` into `out` (length `basis_len(x.len())`).
#[inline]
pub fn fill_monomials(x: &[f64], out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(out.len(), basis_len(d));
    out[0] = 1.0;
    out[1..=d].copy_from_slice(x);
    let mut idx = d + 1;
    for a in 0..d {
        let xa = x[a];
        for &xb in &x[a..] {
            out[idx] = xa * xb;
            idx += 1;
        }
    }
}

/// Human-readable monomial names, 1-based variable indices.
pub fn monomial_names(d: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(basis_len(d));
    names.push("1".to_string());
    for a in 0..d {
        names.push(format!("x{}", a + 1));
    }
    for a in 0..d {
        for b in a..d {
            if a == b {
                names.push(format!("x{}^2", a + 1));
            } else {
                names.push(format!("x{}*x{}", a + 1, b + 1));
            }
        }
    }
    names
}
