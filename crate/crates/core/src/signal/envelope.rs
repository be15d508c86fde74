use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{EchoComponent, FitConfig};
use crate::error::Result;

/// Analytic signal via the frequency domain: negative frequencies zeroed,
/// positive frequencies doubled. Works for any length.
pub fn analytic_signal(signal: &[f64]) -> Vec<Complex64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft.process(&mut buf);

    // DC (and Nyquist for even n) keep unit weight.
    let half = n / 2;
    let last_doubled = if n % 2 == 0 { half - 1 } else { half };
    for v in buf.iter_mut().take(last_doubled + 1).skip(1) {
        *v *= 2.0;
    }
    for v in buf.iter_mut().skip(half + 1) {
        *v = Complex64::new(0.0, 0.0);
    }

    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Magnitude of the analytic signal.
pub fn envelope(signal: &[f64]) -> Vec<f64> {
    analytic_signal(signal).iter().map(|c| c.norm()).collect()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 0 {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    }
}

/// Smallest envelope height accepted as an echo.
pub(crate) fn detection_floor(env: &[f64], config: &FitConfig) -> f64 {
    let peak = env.iter().copied().fold(0.0, f64::max);
    let mut sorted = env.to_vec();
    (config.min_peak_to_median * median(&mut sorted)).max(config.min_relative_peak * peak)
}

/// Initial echo components from rising flanks of the envelope.
///
/// An onset is declared where the forward envelope difference rises above
/// `threshold_factor` times its median absolute value (floored relative to
/// the envelope peak). Each onset is followed to the next local envelope
/// maximum, which seeds `mu` and `alpha`.
pub fn initial_toa_estimates(waveform: &[f64], config: &FitConfig) -> Result<Vec<EchoComponent>> {
    let env = envelope(waveform);
    let peak = env.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) || env.len() < 2 {
        return Ok(Vec::new());
    }

    let grad: Vec<f64> = env.windows(2).map(|w| w[1] - w[0]).collect();
    let mut abs_grad: Vec<f64> = grad.iter().map(|g| g.abs()).collect();
    let threshold = (config.gradient_threshold_factor * median(&mut abs_grad))
        .max(config.relative_gradient_floor * peak);
    let height_floor = detection_floor(&env, config);

    let mut peaks: Vec<(usize, f64)> = Vec::new();
    let mut i = 0;
    while i < grad.len() {
        if grad[i] > threshold {
            let mut j = i;
            while j < grad.len() && grad[j] > 0.0 {
                j += 1;
            }
            // env[j] is the first sample after the rise stops.
            if env[j] >= height_floor {
                peaks.push((j, env[j]));
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }

    // Collapse peaks closer than the expected pulse spread; ripples on a
    // single flank must not become separate echoes.
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(peaks.len());
    for (idx, h) in peaks {
        match merged.last_mut() {
            Some(last) if ((idx - last.0) as f64) < config.sigma_init => {
                if h > last.1 {
                    *last = (idx, h);
                }
            }
            _ => merged.push((idx, h)),
        }
    }
    if merged.len() > config.max_components {
        // Keep the strongest, then restore time order.
        merged.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        merged.truncate(config.max_components);
        merged.sort_by_key(|p| p.0);
    }

    Ok(merged
        .into_iter()
        .map(|(idx, h)| EchoComponent {
            alpha: h,
            mu: idx as f64,
            sigma: config.sigma_init,
            eta: 0.0,
            omega: config.omega_init,
            phi: 0.0,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::memgo_sum;
    use crate::signal::sample_grid;

    fn cfg() -> FitConfig {
        FitConfig {
            sigma_init: 6.0,
            omega_init: std::f64::consts::TAU / 8.0,
            ..FitConfig::default()
        }
    }

    fn pulse(mu: f64) -> EchoComponent {
        EchoComponent {
            alpha: 1.0,
            mu,
            sigma: 6.0,
            eta: 0.0,
            omega: std::f64::consts::TAU / 8.0,
            phi: 0.0,
        }
    }

    #[test]
    fn analytic_signal_of_cosine() {
        // Hilbert transform of cos is sin for an integer number of periods.
        let n = 96;
        let x: Vec<f64> = (0..n).map(|i| (std::f64::consts::TAU * 4.0 * i as f64 / n as f64).cos()).collect();
        let a = analytic_signal(&x);
        for (i, v) in a.iter().enumerate() {
            let s = (std::f64::consts::TAU * 4.0 * i as f64 / n as f64).sin();
            assert!((v.re - x[i]).abs() < 1e-12);
            assert!((v.im - s).abs() < 1e-12);
        }
        // Odd length.
        let x: Vec<f64> = (0..75).map(|i| (std::f64::consts::TAU * 5.0 * i as f64 / 75.0).cos()).collect();
        assert!(envelope(&x).iter().all(|e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_waveform_has_no_echoes() {
        assert!(initial_toa_estimates(&[0.0; 64], &cfg()).unwrap().is_empty());
    }

    #[test]
    fn single_pulse_near_envelope_argmax() {
        let grid = sample_grid(512);
        let y = memgo_sum(&[pulse(200.0)], &grid).unwrap();
        let env = envelope(&y);
        let argmax = env
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0 as f64;
        let est = initial_toa_estimates(&y, &cfg()).unwrap();
        assert_eq!(est.len(), 1);
        assert!((est[0].mu - argmax).abs() <= 1.0);
        assert!((est[0].mu - 200.0).abs() <= 5.0);
        assert_eq!(est[0].eta, 0.0);
        assert_eq!(est[0].phi, 0.0);
    }

    #[test]
    fn two_separated_pulses() {
        let grid = sample_grid(512);
        let y = memgo_sum(&[pulse(200.0), pulse(260.0)], &grid).unwrap();
        let est = initial_toa_estimates(&y, &cfg()).unwrap();
        assert_eq!(est.len(), 2);
        assert!(est[0].mu < est[1].mu);
        assert!((est[0].mu - 200.0).abs() <= 5.0);
        assert!((est[1].mu - 260.0).abs() <= 5.0);
    }

    #[test]
    fn component_cap_keeps_strongest() {
        let grid = sample_grid(2048);
        let comps: Vec<_> = (0..10)
            .map(|k| EchoComponent { alpha: 1.0 + k as f64, ..pulse(100.0 + 150.0 * k as f64) })
            .collect();
        let y = memgo_sum(&comps, &grid).unwrap();
        let c = FitConfig { max_components: 3, ..cfg() };
        let est = initial_toa_estimates(&y, &c).unwrap();
        assert_eq!(est.len(), 3);
        assert!((est[0].mu - 1150.0).abs() < 5.0);
        assert!((est[2].mu - 1450.0).abs() < 5.0);
    }
}
