//! Closed-form intersection of two conics.
//!
//! Both curves are rescaled to a unit y^2 coefficient so their difference
//! `D = A - B` has no y^2 term. Completing the square in `A` with
//! `y = w - (a2 + a4 x) / 2` gives `A = w^2 + c(x)`, and `D` becomes
//! `e(x) + f(x) w`. Eliminating `w` leaves the quartic `e^2 + c f^2 = 0`
//! in `x`. Every root is lifted back to a point and polished with Newton
//! steps on the original pair of equations.

use nalgebra::Matrix2;

use super::conic::QuadraticCurve;
use super::poly;
use crate::error::{Error, Result};
use crate::types::Vec2;

/// Accepted points satisfy both curves to this normalized residual.
pub const RESIDUAL_TOL: f64 = 1e-7;
/// Near-real roots whose residual stays between `RESIDUAL_TOL` and this
/// bound cannot be decided and make the intersection ill-conditioned.
const AMBIGUOUS_TOL: f64 = 1e-3;
const COEFF_REL_TOL: f64 = 1e-12;
const IMAG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub point: Vec2,
    /// `1 / sin` of the crossing angle between the curves. 1 for a
    /// perpendicular crossing, unbounded near tangency.
    pub condition: f64,
}

/// All real intersection points of two conics.
pub fn intersect_ellipses(a: &QuadraticCurve, b: &QuadraticCurve) -> Result<Vec<Vec2>> {
    Ok(intersect_detailed(a, b)?.into_iter().map(|i| i.point).collect())
}

/// Like [`intersect_ellipses`], with a conditioning score per point.
pub fn intersect_detailed(a: &QuadraticCurve, b: &QuadraticCurve) -> Result<Vec<Intersection>> {
    let (origin, scale) = working_frame(a, b);
    let mut angle = 0.0;
    let (mut la, mut lb) = (a.in_frame(&origin, scale, 0.0), b.in_frame(&origin, scale, 0.0));
    if !has_y2(&la) || !has_y2(&lb) {
        angle = 0.5;
        la = a.in_frame(&origin, scale, angle);
        lb = b.in_frame(&origin, scale, angle);
        if !has_y2(&la) || !has_y2(&lb) {
            angle = 1.2;
            la = a.in_frame(&origin, scale, angle);
            lb = b.in_frame(&origin, scale, angle);
        }
    }
    let na = la.scaled(1.0 / la.coeffs[5]);
    let nb = lb.scaled(1.0 / lb.coeffs[5]);

    let mut accepted: Vec<Intersection> = Vec::new();
    let mut ambiguous: Vec<Vec2> = Vec::new();
    for p in raw_points(&na, &nb)? {
        let p = newton_polish(&na, &nb, p);
        let world = to_world(&p, &origin, scale, angle);
        let residual = a.normalized_eval(&world).abs().max(b.normalized_eval(&world).abs());
        if residual < RESIDUAL_TOL {
            let condition = crossing_condition(a, b, &world);
            accepted.push(Intersection { point: world, condition });
        } else if residual < AMBIGUOUS_TOL {
            ambiguous.push(world);
        }
    }

    let dedup_radius = 1e-7 * scale;
    let mut unique: Vec<Intersection> = Vec::with_capacity(accepted.len());
    for cand in accepted {
        if !unique.iter().any(|u| (u.point - cand.point).norm() <= dedup_radius) {
            unique.push(cand);
        }
    }
    ambiguous.retain(|p| !unique.iter().any(|u| (u.point - p).norm() <= 1e-4 * scale));

    if !ambiguous.is_empty() || unique.len() > 4 {
        let mut roots: Vec<Vec2> = unique.iter().map(|u| u.point).collect();
        roots.extend(ambiguous);
        return Err(Error::IllConditioned { roots });
    }
    unique.sort_by(|p, q| p.point.x.total_cmp(&q.point.x).then(p.point.y.total_cmp(&q.point.y)));
    Ok(unique)
}

fn has_y2(c: &QuadraticCurve) -> bool {
    let m = c.coeffs[3].abs().max(c.coeffs[4].abs()).max(c.coeffs[5].abs());
    c.coeffs[5].abs() > 1e-6 * m
}

/// Translation and scale that bring both curves to unit size near the
/// origin.
fn working_frame(a: &QuadraticCurve, b: &QuadraticCurve) -> (Vec2, f64) {
    match (a.ellipse_shape(), b.ellipse_shape()) {
        (Some((ca, _, ra)), Some((cb, _, rb))) => {
            let scale = ra[0].max(ra[1]).max(rb[0]).max(rb[1]);
            (0.5 * (ca + cb), scale)
        }
        (Some((c, _, r)), None) | (None, Some((c, _, r))) => (c, r[0].max(r[1])),
        (None, None) => (Vec2::zeros(), 1.0),
    }
}

fn to_world(p: &Vec2, origin: &Vec2, scale: f64, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    origin + scale * Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y)
}

/// Candidate points of two curves normalized to unit y^2 coefficient.
fn raw_points(a: &QuadraticCurve, b: &QuadraticCurve) -> Result<Vec<Vec2>> {
    let [a0, a1, a2, a3, a4, _] = a.coeffs;
    let d: Vec<f64> = a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| x - y).collect();
    let coeff_scale = a.coeffs.iter().chain(&b.coeffs).fold(0.0f64, |m, c| m.max(c.abs()));
    let tiny = COEFF_REL_TOL * coeff_scale;
    if d.iter().all(|v| v.abs() <= tiny) {
        return Err(Error::InfiniteIntersections);
    }
    let [d0, d1, d2, d3, d4, _] = [d[0], d[1], d[2], d[3], d[4], d[5]];

    // A = w^2 + c(x); D = e(x) + f(x) w.
    let c = [a0 - 0.25 * a2 * a2, a1 - 0.5 * a2 * a4, a3 - 0.25 * a4 * a4];
    let e = [
        d0 - 0.5 * d2 * a2,
        d1 - 0.5 * (d2 * a4 + d4 * a2),
        d3 - 0.5 * d4 * a4,
    ];
    let f = [d2, d4];
    let y_of = |x: f64, w: f64| w - 0.5 * (a2 + a4 * x);
    let c_at = |x: f64| c[0] + c[1] * x + c[2] * x * x;
    let mut out = Vec::new();
    let push_w_pair = |x: f64, out: &mut Vec<Vec2>| {
        let w2 = -c_at(x);
        let w = w2.max(0.0).sqrt();
        // Slightly negative w^2 can still be a tangency; polishing decides.
        if w2 >= -1e-6 {
            out.push(Vec2::new(x, y_of(x, w)));
            if w > 0.0 {
                out.push(Vec2::new(x, y_of(x, -w)));
            }
        }
    };

    if d2.abs() <= tiny && d4.abs() <= tiny {
        // D depends on x only.
        let Some(ec) = poly::truncate(&e, COEFF_REL_TOL) else {
            return Err(Error::InfiniteIntersections);
        };
        for r in poly::roots(&ec) {
            if r.im.abs() <= IMAG_TOL * (1.0 + r.re.abs()) {
                push_w_pair(r.re, &mut out);
            }
        }
        return Ok(out);
    }

    // e(x)^2 + c(x) f(x)^2
    let e2 = [
        e[0] * e[0],
        2.0 * e[0] * e[1],
        e[1] * e[1] + 2.0 * e[0] * e[2],
        2.0 * e[1] * e[2],
        e[2] * e[2],
    ];
    let f2 = [f[0] * f[0], 2.0 * f[0] * f[1], f[1] * f[1]];
    let mut quartic = e2;
    for (i, ci) in c.iter().enumerate() {
        for (j, fj) in f2.iter().enumerate() {
            quartic[i + j] += ci * fj;
        }
    }
    let Some(qc) = poly::truncate(&quartic, COEFF_REL_TOL) else {
        return Err(Error::InfiniteIntersections);
    };
    let f_scale = f[0].abs().max(f[1].abs());
    for r in poly::roots(&qc) {
        if r.im.abs() > IMAG_TOL * (1.0 + r.re.abs()) {
            continue;
        }
        let x = r.re;
        let fx = f[0] + f[1] * x;
        if fx.abs() > 1e-8 * f_scale * (1.0 + x.abs()) {
            let ex = e[0] + e[1] * x + e[2] * x * x;
            out.push(Vec2::new(x, y_of(x, -ex / fx)));
        } else {
            // f(x) = 0 forces e(x) = 0; w comes from A alone.
            push_w_pair(x, &mut out);
        }
    }
    Ok(out)
}

/// Newton iterations on `(A, B) = 0`; keeps the best iterate.
fn newton_polish(a: &QuadraticCurve, b: &QuadraticCurve, p0: Vec2) -> Vec2 {
    let res = |p: &Vec2| a.eval(p).abs().max(b.eval(p).abs());
    let mut p = p0;
    let mut best = res(&p);
    for _ in 0..8 {
        if best == 0.0 {
            break;
        }
        let ga = a.gradient(&p);
        let gb = b.gradient(&p);
        let jac = Matrix2::new(ga.x, ga.y, gb.x, gb.y);
        let Some(inv) = jac.try_inverse() else { break };
        let step = inv * Vec2::new(a.eval(&p), b.eval(&p));
        let next = p - step;
        let r = res(&next);
        if !(r < best) {
            break;
        }
        p = next;
        best = r;
    }
    p
}

fn crossing_condition(a: &QuadraticCurve, b: &QuadraticCurve, p: &Vec2) -> f64 {
    let ga = a.gradient(p);
    let gb = b.gradient(p);
    let denom = ga.norm() * gb.norm();
    if denom == 0.0 {
        return f64::INFINITY;
    }
    let sin = (ga.x * gb.y - ga.y * gb.x).abs() / denom;
    1.0 / sin
}
