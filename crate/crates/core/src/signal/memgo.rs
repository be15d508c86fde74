use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

use libm::{erf, erfc};

use crate::error::{Error, Result};

/// Six-parameter echo model: a skewed Gaussian envelope modulating a carrier.
///
/// `mu` and `sigma` are in samples, `omega` in radians per sample.
///
/// ```text
/// f(t) = alpha * exp(-(t-mu)^2 / (2 sigma^2))
///              * (1 + erf(eta (t-mu) / (sigma sqrt 2)))
///              * cos(omega (t-mu) + phi)
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoComponent {
    pub alpha: f64,
    pub mu: f64,
    pub sigma: f64,
    pub eta: f64,
    pub omega: f64,
    pub phi: f64,
}

pub const NUM_PARAMS: usize = 6;

impl EchoComponent {
    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite echo parameters: {self:?}")));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.omega <= 0.0 {
            return Err(Error::InvalidArgument(format!("omega must be > 0, got {}", self.omega)));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; NUM_PARAMS] {
        [self.alpha, self.mu, self.sigma, self.eta, self.omega, self.phi]
    }

    pub fn from_slice(p: &[f64]) -> Self {
        Self {
            alpha: p[0],
            mu: p[1],
            sigma: p[2],
            eta: p[3],
            omega: p[4],
            phi: p[5],
        }
    }

    /// Model value at time `t` (samples). Assumes a valid component.
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let u = t - self.mu;
        let gauss = (-0.5 * (u / self.sigma).powi(2)).exp();
        if gauss == 0.0 {
            return 0.0;
        }
        let skew = 1.0 + erf(self.eta * u / (self.sigma * SQRT_2));
        self.alpha * gauss * skew * (self.omega * u + self.phi).cos()
    }

    /// Model value and its partial derivatives with respect to
    /// `[alpha, mu, sigma, eta, omega, phi]`.
    #[inline]
    pub fn value_and_gradient(&self, t: f64) -> (f64, [f64; NUM_PARAMS]) {
        let Self {
            alpha,
            mu,
            sigma,
            eta,
            omega,
            phi,
        } = *self;
        let u = t - mu;
        let gauss = (-0.5 * (u / sigma).powi(2)).exp();
        if gauss == 0.0 {
            return (0.0, [0.0; NUM_PARAMS]);
        }
        let z = eta * u / (sigma * SQRT_2);
        let skew = 1.0 + erf(z);
        let dskew_dz = FRAC_2_SQRT_PI * (-z * z).exp();
        let (sin, cos) = (omega * u + phi).sin_cos();

        let ge = gauss * skew;
        let value = alpha * ge * cos;

        let d_alpha = ge * cos;
        let d_mu = alpha
            * (gauss * (u / (sigma * sigma)) * skew * cos
                - gauss * dskew_dz * (eta / (sigma * SQRT_2)) * cos
                + ge * omega * sin);
        let d_sigma = alpha
            * (gauss * (u * u / sigma.powi(3)) * skew * cos
                - gauss * dskew_dz * (eta * u / (sigma * sigma * SQRT_2)) * cos);
        let d_eta = alpha * gauss * dskew_dz * (u / (sigma * SQRT_2)) * cos;
        let d_omega = -alpha * ge * sin * u;
        let d_phi = -alpha * ge * sin;
        (value, [d_alpha, d_mu, d_sigma, d_eta, d_omega, d_phi])
    }

    /// Half-width in samples outside of which the envelope is below ~1e-14
    /// of its peak.
    pub fn support_radius(&self) -> f64 {
        8.0 * self.sigma
    }

    /// Time (samples) of the envelope maximum. The log-envelope is concave,
    /// so its derivative is bracketed and bisected.
    pub fn envelope_peak(&self) -> f64 {
        let (sigma, eta) = (self.sigma, self.eta);
        let slope = |u: f64| {
            let z = eta * u / (sigma * SQRT_2);
            let skew = erfc(-z);
            let pull = if skew > 0.0 { FRAC_2_SQRT_PI * (-z * z).exp() * eta / (sigma * SQRT_2) / skew } else { f64::INFINITY };
            pull - u / (sigma * sigma)
        };
        let (mut lo, mut hi) = (-10.0 * sigma, 10.0 * sigma);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.mu + 0.5 * (lo + hi)
    }

    /// Carrier phase wrapped into `(-pi, pi]`.
    pub fn wrapped_phase(&self) -> f64 {
        let tau = std::f64::consts::TAU;
        let mut p = self.phi.rem_euclid(tau);
        if p > std::f64::consts::PI {
            p -= tau;
        }
        p
    }
}

/// Evaluates one component over a time grid (samples).
pub fn memgo_eval(component: &EchoComponent, t: &[f64]) -> Result<Vec<f64>> {
    component.validate()?;
    Ok(t.iter().map(|&ti| component.value(ti)).collect())
}

/// Pointwise sum of all components over a time grid.
pub fn memgo_sum(components: &[EchoComponent], t: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; t.len()];
    for c in components {
        c.validate()?;
        for (o, &ti) in out.iter_mut().zip(t) {
            *o += c.value(ti);
        }
    }
    Ok(out)
}

/// Squared L2 residual between a waveform sampled at `0, 1, .., T-1` and the
/// summed model.
pub fn memgo_loss(components: &[EchoComponent], waveform: &[f64]) -> Result<f64> {
    let grid = sample_grid(waveform.len());
    let model = memgo_sum(components, &grid)?;
    Ok(waveform
        .iter()
        .zip(&model)
        .map(|(y, m)| (y - m) * (y - m))
        .sum())
}

pub fn sample_grid(len: usize) -> Vec<f64> {
    (0..len).map(|i| i as f64).collect()
}
