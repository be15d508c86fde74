use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::types::{AcquisitionConfig, Vec2};

/// Locus of points whose distances to two foci sum to a fixed path length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseSpec {
    /// Virtual source.
    pub focus_a: Vec2,
    /// Receiver.
    pub focus_b: Vec2,
    pub r_major: f64,
    pub r_minor: f64,
    pub center: Vec2,
    /// Unit vector from `focus_a` to `focus_b`; `(1, 0)` when the foci
    /// coincide.
    pub axis_dir: Vec2,
}

impl EllipseSpec {
    pub fn from_foci(focus_a: Vec2, focus_b: Vec2, path_length: f64) -> Result<Self> {
        let sep = (focus_b - focus_a).norm();
        if !(path_length > sep) || !path_length.is_finite() {
            return Err(Error::DegenerateEllipse {
                path_length,
                focal_separation: sep,
            });
        }
        let axis_dir = if sep > 0.0 {
            (focus_b - focus_a) / sep
        } else {
            Vec2::new(1.0, 0.0)
        };
        Ok(Self {
            focus_a,
            focus_b,
            r_major: 0.5 * path_length,
            r_minor: 0.5 * ((path_length - sep) * (path_length + sep)).sqrt(),
            center: 0.5 * (focus_a + focus_b),
            axis_dir,
        })
    }

    pub fn path_length(&self) -> f64 {
        2.0 * self.r_major
    }

    /// Point at parameter `theta` on the boundary.
    pub fn point_at(&self, theta: f64) -> Vec2 {
        let perp = Vec2::new(-self.axis_dir.y, self.axis_dir.x);
        self.center + self.r_major * theta.cos() * self.axis_dir + self.r_minor * theta.sin() * perp
    }

    /// `|p - focus_a| + |p - focus_b| - path_length`, in meters.
    pub fn focal_residual(&self, p: &Vec2) -> f64 {
        (p - self.focus_a).norm() + (p - self.focus_b).norm() - self.path_length()
    }
}

/// Ellipse for an echo arriving `toa` seconds after transmission: the
/// round-trip path `c * toa` connects the virtual source and the receiver.
pub fn build_ellipse(toa: f64, receiver: Vec2, source: Vec2, config: &AcquisitionConfig) -> Result<EllipseSpec> {
    let path = crate::types::toa_to_distance(toa, config)?;
    EllipseSpec::from_foci(source, receiver, path)
}

/// General conic `b0 + b1 x + b2 y + b3 x^2 + b4 xy + b5 y^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCurve {
    pub coeffs: [f64; 6],
}

impl QuadraticCurve {
    pub fn new(coeffs: [f64; 6]) -> Result<Self> {
        if !coeffs.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite conic coefficient".into()));
        }
        if coeffs[3] == 0.0 && coeffs[4] == 0.0 && coeffs[5] == 0.0 {
            return Err(Error::InvalidArgument("conic has no quadratic terms".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn eval(&self, p: &Vec2) -> f64 {
        let [b0, b1, b2, b3, b4, b5] = self.coeffs;
        let (x, y) = (p.x, p.y);
        b0 + b1 * x + b2 * y + b3 * x * x + b4 * x * y + b5 * y * y
    }

    pub fn gradient(&self, p: &Vec2) -> Vec2 {
        let [_, b1, b2, b3, b4, b5] = self.coeffs;
        Vec2::new(b1 + 2.0 * b3 * p.x + b4 * p.y, b2 + b4 * p.x + 2.0 * b5 * p.y)
    }

    pub fn quadratic_form(&self) -> Matrix2<f64> {
        let [_, _, _, b3, b4, b5] = self.coeffs;
        Matrix2::new(b3, 0.5 * b4, 0.5 * b4, b5)
    }

    fn linear(&self) -> Vector2<f64> {
        Vector2::new(self.coeffs[1], self.coeffs[2])
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            coeffs: self.coeffs.map(|c| c * k),
        }
    }

    /// The same curve expressed in coordinates `p'` with
    /// `p = origin + scale * R(angle) * p'`.
    pub fn in_frame(&self, origin: &Vec2, scale: f64, angle: f64) -> Self {
        let q = self.quadratic_form();
        let l = self.linear();
        let (s, c) = angle.sin_cos();
        let m = Matrix2::new(c, -s, s, c) * scale;
        let q2 = m.transpose() * q * m;
        let l2 = m.transpose() * (2.0 * q * origin + l);
        let k2 = origin.dot(&(q * origin)) + l.dot(origin) + self.coeffs[0];
        Self {
            coeffs: [k2, l2.x, l2.y, q2[(0, 0)], q2[(0, 1)] + q2[(1, 0)], q2[(1, 1)]],
        }
    }

    /// Center, value at the center, and semi-axis lengths if the curve is a
    /// real ellipse.
    pub fn ellipse_shape(&self) -> Option<(Vec2, f64, [f64; 2])> {
        let q = self.quadratic_form();
        let det = q.determinant();
        if !(det > 0.0) {
            return None;
        }
        let center = -0.5 * q.try_inverse()? * self.linear();
        let value = self.eval(&center);
        let eig = q.symmetric_eigenvalues();
        // Real ellipse needs the center value opposite in sign to the form.
        let sign = if q[(0, 0)] > 0.0 { 1.0 } else { -1.0 };
        if !(value * sign < 0.0) {
            return None;
        }
        let r0 = (-value / eig[0]).sqrt();
        let r1 = (-value / eig[1]).sqrt();
        Some((center, value, [r0, r1]))
    }

    /// Value scaled so that an ellipse evaluates to `-1` at its center and
    /// `0` on its boundary; other conics are scaled by their largest
    /// coefficient.
    pub fn normalized_eval(&self, p: &Vec2) -> f64 {
        let scale = match self.ellipse_shape() {
            Some((_, v, _)) => v.abs(),
            None => self.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs())),
        };
        self.eval(p) / scale
    }
}

/// Expands `(s - c)^T M (s - c) = 1` with
/// `M = v v^T / r_major^2 + v' v'^T / r_minor^2` into conic coefficients.
/// The result evaluates to `-1` at the center.
pub fn ellipse_to_quadratic(e: &EllipseSpec) -> QuadraticCurve {
    let v = e.axis_dir;
    let perp = Vec2::new(-v.y, v.x);
    let m: Matrix2<f64> = v * v.transpose() / (e.r_major * e.r_major) + perp * perp.transpose() / (e.r_minor * e.r_minor);
    let mc = m * e.center;
    QuadraticCurve {
        coeffs: [
            e.center.dot(&mc) - 1.0,
            -2.0 * mc.x,
            -2.0 * mc.y,
            m[(0, 0)],
            m[(0, 1)] + m[(1, 0)],
            m[(1, 1)],
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_foci_give_circle() {
        let e = EllipseSpec::from_foci(Vec2::new(0.3, 0.0), Vec2::new(0.3, 0.0), 2.0).unwrap();
        assert_eq!(e.r_major, 1.0);
        assert_eq!(e.r_minor, 1.0);
    }

    #[test]
    fn radii_from_path_length() {
        let e = EllipseSpec::from_foci(Vec2::zeros(), Vec2::new(0.02, 0.0), 0.04).unwrap();
        assert!((e.r_major - 0.02).abs() < 1e-15);
        // 0.5 * sqrt(0.0016 - 0.0004) = 0.017320508075688772...
        assert!((e.r_minor - 0.017_320_508_075_688_772).abs() < 1e-15);
        assert_eq!(e.center, Vec2::new(0.01, 0.0));
        let sep_half = 0.01;
        let ident = e.r_major.powi(2) - e.r_minor.powi(2);
        assert!((ident - sep_half * sep_half).abs() < 1e-9 * sep_half * sep_half);
    }

    #[test]
    fn boundary_path_is_degenerate() {
        let err = EllipseSpec::from_foci(Vec2::zeros(), Vec2::new(0.02, 0.0), 0.02).unwrap_err();
        assert!(matches!(err, Error::DegenerateEllipse { .. }));
    }

    #[test]
    fn build_ellipse_uses_speed_of_sound() {
        let acq = AcquisitionConfig {
            speed_of_sound: 1500.0,
            sample_rate: 1e7,
            center_frequency: 1e6,
            num_channels: 2,
            num_samples: 10,
            transmit_delay_offset: 0.0,
        };
        let e = build_ellipse(2e-5, Vec2::new(0.01, 0.0), Vec2::zeros(), &acq).unwrap();
        assert!((e.path_length() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn unit_circle_coefficients() {
        let e = EllipseSpec::from_foci(Vec2::zeros(), Vec2::zeros(), 2.0).unwrap();
        let q = ellipse_to_quadratic(&e);
        let expected = [-1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        for (a, b) in q.coeffs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn axis_aligned_coefficients_proportional() {
        // x^2/4 + y^2 = 1: foci at +-sqrt(3), path 4.
        let f = 3.0f64.sqrt();
        let e = EllipseSpec::from_foci(Vec2::new(-f, 0.0), Vec2::new(f, 0.0), 4.0).unwrap();
        let q = ellipse_to_quadratic(&e);
        let expected = [-1.0, 0.0, 0.0, 0.25, 0.0, 1.0];
        let k = q.coeffs[5];
        for (a, b) in q.coeffs.iter().zip(expected) {
            assert!((a / k - b).abs() < 1e-12, "{:?}", q.coeffs);
        }
    }

    #[test]
    fn rotated_boundary_samples_vanish() {
        // 45 degrees, radii 2 and 1, center (1, 2).
        let v = Vec2::new(1.0, 1.0).normalize();
        let c = 3.0f64.sqrt();
        let e = EllipseSpec::from_foci(Vec2::new(1.0, 2.0) - c * v, Vec2::new(1.0, 2.0) + c * v, 4.0).unwrap();
        assert!((e.r_minor - 1.0).abs() < 1e-12);
        let q = ellipse_to_quadratic(&e);
        for k in 0..32 {
            let theta = std::f64::consts::TAU * k as f64 / 32.0;
            let p = Vec2::new(1.0, 2.0) + 2.0 * theta.cos() * v + theta.sin() * Vec2::new(-v.y, v.x);
            assert!(q.eval(&p).abs() < 1e-9);
        }
        assert!(q.eval(&e.center) < 0.0);
    }

    #[test]
    fn frame_change_preserves_zero_set() {
        let e = EllipseSpec::from_foci(Vec2::new(0.1, 0.2), Vec2::new(0.5, -0.3), 1.4).unwrap();
        let q = ellipse_to_quadratic(&e);
        let origin = Vec2::new(0.3, -0.7);
        let (scale, angle) = (0.25, 0.9);
        let moved = q.in_frame(&origin, scale, angle);
        let (s, c) = angle.sin_cos();
        for k in 0..16 {
            let p = e.point_at(k as f64);
            let d = (p - origin) / scale;
            let local = Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y);
            assert!(moved.eval(&local).abs() < 1e-12);
        }
        let (center, value, radii) = q.ellipse_shape().unwrap();
        assert!((center - e.center).norm() < 1e-12);
        assert!((value + 1.0).abs() < 1e-12);
        let mut r = radii;
        r.sort_by(f64::total_cmp);
        assert!((r[0] - e.r_minor).abs() < 1e-12 && (r[1] - e.r_major).abs() < 1e-12);
    }
}
