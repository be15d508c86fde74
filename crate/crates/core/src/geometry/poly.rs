//! Real roots of low-degree polynomials.

use nalgebra::DMatrix;

/// Root of a polynomial together with the imaginary part the eigen-solver
/// reported for it. Roots with a tiny imaginary part may be real double
/// roots smeared by rounding; callers decide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub re: f64,
    pub im: f64,
}

/// Coefficients in ascending order: `c[0] + c[1] x + c[2] x^2 + ...`.
fn eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

fn eval_derivative(c: &[f64], x: f64) -> f64 {
    c.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, &k)| acc * x + i as f64 * k)
}

/// Drops leading coefficients that are negligible relative to the largest
/// one. Returns `None` for the zero polynomial.
pub fn truncate(coeffs: &[f64], rel_tol: f64) -> Option<Vec<f64>> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return None;
    }
    let mut c: Vec<f64> = coeffs.iter().map(|v| v / scale).collect();
    while c.len() > 1 && c.last().is_some_and(|v| v.abs() < rel_tol) {
        c.pop();
    }
    Some(c)
}

fn quadratic_roots(c0: f64, c1: f64, c2: f64) -> Vec<Root> {
    let disc = c1 * c1 - 4.0 * c2 * c0;
    if disc >= 0.0 {
        // Avoids cancellation in the smaller-magnitude root.
        let sign = if c1 < 0.0 { -1.0 } else { 1.0 };
        let q = -0.5 * (c1 + sign * disc.sqrt());
        let r1 = q / c2;
        let r2 = if q != 0.0 { c0 / q } else { r1 };
        vec![Root { re: r1, im: 0.0 }, Root { re: r2, im: 0.0 }]
    } else {
        let re = -c1 / (2.0 * c2);
        let im = (-disc).sqrt() / (2.0 * c2.abs());
        vec![Root { re, im }, Root { re, im: -im }]
    }
}

/// All complex roots of a polynomial of degree <= 4 (ascending
/// coefficients, already truncated so the last one is significant).
///
/// Degrees 1 and 2 are solved in closed form; higher degrees use the
/// eigenvalues of the companion matrix followed by Newton polishing of the
/// real parts.
pub fn roots(c: &[f64]) -> Vec<Root> {
    let degree = c.len().saturating_sub(1);
    match degree {
        0 => Vec::new(),
        1 => vec![Root { re: -c[0] / c[1], im: 0.0 }],
        2 => quadratic_roots(c[0], c[1], c[2]),
        _ => {
            let lead = c[degree];
            let companion = DMatrix::from_fn(degree, degree, |i, j| {
                if i == 0 {
                    -c[degree - 1 - j] / lead
                } else if i == j + 1 {
                    1.0
                } else {
                    0.0
                }
            });
            companion
                .complex_eigenvalues()
                .iter()
                .map(|z| Root {
                    re: polish(c, z.re),
                    im: z.im,
                })
                .collect()
        }
    }
}

/// Newton refinement of a real root estimate; keeps the input if Newton
/// does not reduce the residual.
pub fn polish(c: &[f64], x0: f64) -> f64 {
    let mut x = x0;
    let mut fx = eval(c, x).abs();
    for _ in 0..6 {
        let d = eval_derivative(c, x);
        if d == 0.0 || !d.is_finite() {
            break;
        }
        let next = x - eval(c, x) / d;
        let fn_ = eval(c, next).abs();
        if !(fn_ < fx) {
            break;
        }
        x = next;
        fx = fn_;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted_real(c: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = roots(c).into_iter().filter(|r| r.im.abs() < 1e-9).map(|r| r.re).collect();
        r.sort_by(f64::total_cmp);
        r
    }

    #[test]
    fn quartic_with_four_real_roots() {
        // (x-1)(x+2)(x-3)(x+0.5) = x^4 - 1.5x^3 - 6x^2 + 3.5x + 3
        let r = sorted_real(&[3.0, 3.5, -6.0, -1.5, 1.0]);
        let expected = [-2.0, -0.5, 1.0, 3.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_cancellation_safe() {
        // x^2 - 1e8 x + 1: roots ~1e8 and ~1e-8.
        let r = sorted_real(&[1.0, -1e8, 1.0]);
        assert!((r[0] - 1e-8).abs() < 1e-20);
        assert!((r[1] - 1e8).abs() < 1e-6);
        let r = sorted_real(&[-4.0, 0.0, 1.0]);
        assert_eq!(r, vec![-2.0, 2.0]);
    }

    #[test]
    fn truncation_lowers_degree() {
        let c = truncate(&[2.0, -1.0, 1e-15, 1e-16], 1e-12).unwrap();
        assert_eq!(c.len(), 2);
        assert!(truncate(&[0.0, 0.0], 1e-12).is_none());
    }

    #[test]
    fn complex_pair_reported() {
        let r = roots(&[1.0, 0.0, 1.0]);
        assert!(r.iter().all(|z| z.im.abs() > 0.5));
    }
}
