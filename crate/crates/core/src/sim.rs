//! Synthetic RF frames from point-scatterer scenes, with additive noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::signal::{fit_channel, EchoComponent, FitConfig};
use crate::types::{AcquisitionConfig, GroundTruthScene, RFFrame, Region, TransducerGeometry, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PulseShape {
    /// The echo model itself, so fitted echoes can be exact.
    Memgo,
    /// Hann-windowed tone burst, outside the fitting model class.
    RaisedCosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseModel {
    pub center_frequency: f64,
    pub num_cycles: f64,
    /// Template with unit amplitude; `mu` is the delay from arrival to the
    /// envelope center, in samples.
    pub envelope: EchoComponent,
    pub shape: PulseShape,
}

impl PulseModel {
    /// Pulse of `num_cycles` carrier cycles whose spread is a quarter of
    /// its length, centered three spreads after the arrival so that the
    /// leading edge starts near the arrival time.
    pub fn memgo(acq: &AcquisitionConfig, num_cycles: f64, eta: f64) -> Self {
        let length = num_cycles * acq.sample_rate / acq.center_frequency;
        let sigma = 0.25 * length;
        Self {
            center_frequency: acq.center_frequency,
            num_cycles,
            envelope: EchoComponent {
                alpha: 1.0,
                mu: 3.0 * sigma,
                sigma,
                eta,
                omega: acq.omega_per_sample(),
                phi: 0.0,
            },
            shape: PulseShape::Memgo,
        }
    }

    pub fn raised_cosine(acq: &AcquisitionConfig, num_cycles: f64) -> Self {
        let length = num_cycles * acq.sample_rate / acq.center_frequency;
        Self {
            shape: PulseShape::RaisedCosine,
            envelope: EchoComponent {
                mu: 0.5 * length,
                sigma: 0.25 * length,
                eta: 0.0,
                ..Self::memgo(acq, num_cycles, 0.0).envelope
            },
            ..Self::memgo(acq, num_cycles, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.num_cycles >= 1.0) {
            return Err(Error::InvalidArgument(format!("pulse needs >= 1 cycle, got {}", self.num_cycles)));
        }
        self.envelope.validate()
    }

    /// Samples after the arrival beyond which the pulse is negligible.
    fn extent(&self) -> f64 {
        match self.shape {
            PulseShape::Memgo => self.envelope.mu + self.envelope.support_radius(),
            PulseShape::RaisedCosine => 2.0 * self.envelope.mu,
        }
    }

    fn lead(&self) -> f64 {
        match self.shape {
            PulseShape::Memgo => self.envelope.support_radius() - self.envelope.mu,
            PulseShape::RaisedCosine => 0.0,
        }
    }

    /// Pulse value `u` samples after the arrival.
    pub fn value(&self, u: f64) -> f64 {
        match self.shape {
            PulseShape::Memgo => self.envelope.value(u),
            PulseShape::RaisedCosine => {
                let len = 2.0 * self.envelope.mu;
                if !(0.0..=len).contains(&u) {
                    return 0.0;
                }
                let window = 0.5 * (1.0 - (std::f64::consts::TAU * u / len).cos());
                window * (self.envelope.omega * (u - self.envelope.mu)).cos()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub acquisition: AcquisitionConfig,
    /// Scatterers must lie inside this region.
    pub field: Region,
    /// Scale echoes by `1 / (|s - u_s| * |s - u_n|)` relative to 1 m^2.
    pub spherical_spreading: bool,
}

/// Sums one delayed, scaled pulse per scatterer and channel.
pub fn simulate_frame(
    scene: &GroundTruthScene,
    geometry: &TransducerGeometry,
    pulse: &PulseModel,
    config: &SimConfig,
) -> Result<RFFrame> {
    let acq = &config.acquisition;
    geometry.validate(acq.num_channels)?;
    pulse.validate()?;
    if let Some(p) = scene.positions.iter().find(|p| !(p.y > 0.0) || !config.field.contains(p)) {
        return Err(Error::InvalidScene(format!("scatterer at ({}, {}) m is outside the field", p.x, p.y)));
    }
    let mut frame = RFFrame::zeros(scene.frame_id, acq.num_channels, acq.num_samples);
    let t_len = acq.num_samples as f64;
    for n in 0..acq.num_channels {
        let trace = frame.channel_mut(n);
        for (s, &amp) in scene.positions.iter().zip(&scene.amplitudes) {
            let arrival = geometry.round_trip(s, n) / acq.speed_of_sound * acq.sample_rate;
            let gain = if config.spherical_spreading {
                amp / ((s - geometry.virtual_source).norm() * (s - geometry.receivers[n]).norm())
            } else {
                amp
            };
            let lo = (arrival - pulse.lead()).floor().max(0.0);
            let hi = (arrival + pulse.extent()).ceil().min(t_len - 1.0);
            if hi < lo {
                continue;
            }
            for i in lo as usize..=hi as usize {
                trace[i] += gain * pulse.value(i as f64 - arrival);
            }
        }
    }
    Ok(frame)
}

/// Constants tying fitted echoes of a pulse to its true arrival.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseCalibration {
    /// Seconds from the true arrival to the refined arrival reported for
    /// the pulse; the transmit delay offset.
    pub onset_offset: f64,
    /// Samples from the carrier epoch to the envelope peak; see
    /// [`PhaseSource::CarrierLocked`](crate::toa::PhaseSource::CarrierLocked).
    pub envelope_lead: f64,
}

/// Fits the pulse alone at a known arrival. The refined arrival is the
/// carrier epoch `mu - phi / omega + k * period` nearest the envelope peak.
pub fn calibrate_pulse(pulse: &PulseModel, acq: &AcquisitionConfig, fit: &FitConfig) -> Result<PulseCalibration> {
    let t_len = acq.num_samples.max(16);
    let arrival = (t_len as f64 / 2.0 - pulse.envelope.mu).max(pulse.lead()).floor();
    let trace: Vec<f64> = (0..t_len).map(|i| pulse.value(i as f64 - arrival)).collect();
    let set = fit_channel(0, &trace, fit)?;
    let strongest = set
        .components
        .iter()
        .max_by(|a, b| a.alpha.abs().total_cmp(&b.alpha.abs()))
        .ok_or_else(|| Error::InvalidArgument("pulse produced no detectable echo".into()))?;
    let period = std::f64::consts::TAU / strongest.omega;
    let peak = strongest.envelope_peak();
    let epoch = strongest.mu - strongest.wrapped_phase() / strongest.omega;
    let epoch = epoch + ((peak - epoch) / period).round() * period;
    Ok(PulseCalibration {
        onset_offset: (epoch - arrival) / acq.sample_rate,
        envelope_lead: strongest.envelope_peak() - epoch,
    })
}

/// The onset offset of [`calibrate_pulse`].
pub fn calibrate_onset_offset(pulse: &PulseModel, acq: &AcquisitionConfig, fit: &FitConfig) -> Result<f64> {
    calibrate_pulse(pulse, acq, fit).map(|c| c.onset_offset)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// `L_C` in dB; `None` disables noise entirely.
    pub clutter_db: Option<f64>,
    /// `L_A` in dB.
    pub amplitude_db: f64,
    /// `P` in dB.
    pub power_db: f64,
    /// `B`.
    pub bandwidth_factor: f64,
    /// Gaussian smoothing of the noise, in samples.
    pub smoothing_sigma: f64,
    pub rf_noise_factor: f64,
    pub rng_seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            clutter_db: None,
            amplitude_db: -10.0,
            power_db: 0.0,
            bandwidth_factor: 1.0,
            smoothing_sigma: 1.5,
            rf_noise_factor: 4.0,
            rng_seed: 0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_sigma > 0.0) || !(self.bandwidth_factor > 0.0) {
            return Err(Error::InvalidArgument(
                "smoothing_sigma and bandwidth_factor must be positive".into(),
            ));
        }
        if self.clutter_db.is_some_and(|v| v.is_nan()) || !self.amplitude_db.is_finite() || !self.power_db.is_finite() {
            return Err(Error::InvalidArgument("noise levels must be numbers".into()));
        }
        Ok(())
    }

    /// `sigma_p = sqrt(B * 10^(P / 10))`.
    pub fn sigma_p(&self) -> f64 {
        (self.bandwidth_factor * 10f64.powf(self.power_db / 10.0)).sqrt()
    }

    /// Standard deviation of the added noise (constant term excluded) for a
    /// channel whose clean peak is `peak`.
    pub fn expected_std(&self, peak: f64) -> f64 {
        let Some(lc) = self.clutter_db.filter(|v| v.is_finite()) else {
            return 0.0;
        };
        let g = gaussian_kernel(self.smoothing_sigma);
        let g2 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.sigma_p() * peak * 10f64.powf((self.amplitude_db + lc) / 20.0) * g2 * self.rf_noise_factor
    }
}

/// Unit-sum Gaussian kernel truncated at four standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Same-length convolution with edge samples replicated.
fn smooth(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let last = signal.len() as i64 - 1;
    (0..signal.len() as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * signal[(i + k as i64 - r).clamp(0, last) as usize])
                .sum()
        })
        .collect()
}

/// Generator for one channel of one frame, independent of every other.
fn channel_rng(seed: u64, frame_id: u64, channel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((frame_id << 20) ^ channel as u64);
    rng
}

/// Adds per channel `n(t) = N(0, sigma_p^2) * m * 10^((L_A + L_C) / 20)
/// +- m * 10^(L_C / 20)` with `m = max |y_n|`, smoothed by a Gaussian kernel
/// and multiplied by `rf_noise_factor`. The sign is drawn once per channel.
pub fn add_noise(frame: &RFFrame, params: &NoiseParams) -> Result<RFFrame> {
    params.validate()?;
    let mut out = frame.clone();
    let Some(lc) = params.clutter_db.filter(|v| v.is_finite()) else {
        return Ok(out);
    };
    let kernel = gaussian_kernel(params.smoothing_sigma);
    let random_gain = params.sigma_p() * 10f64.powf((params.amplitude_db + lc) / 20.0);
    let floor_gain = 10f64.powf(lc / 20.0);
    for n in 0..frame.num_channels() {
        let clean = frame.channel(n);
        let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut rng = channel_rng(params.rng_seed, frame.frame_id, n);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let raw: Vec<f64> = (0..clean.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * peak * random_gain + sign * peak * floor_gain
            })
            .collect();
        let smoothed = smooth(&raw, &kernel);
        for (y, v) in out.channel_mut(n).iter_mut().zip(smoothed) {
            *y += params.rf_noise_factor * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub num_bubbles: usize,
    pub field: Region,
    /// Amplitudes are log-uniform in this range.
    pub amplitude_range: (f64, f64),
}

/// Uniform positions in the field, deterministic per `(seed, frame_id)`.
pub fn generate_scene(frame_id: u64, config: &SceneConfig, seed: u64) -> Result<GroundTruthScene> {
    config.field.validate()?;
    let (lo, hi) = config.amplitude_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad amplitude range ({lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    let f = &config.field;
    let mut positions = Vec::with_capacity(config.num_bubbles);
    let mut amplitudes = Vec::with_capacity(config.num_bubbles);
    for _ in 0..config.num_bubbles {
        positions.push(Vec2::new(
            f.x_min + rng.gen::<f64>() * f.width(),
            f.z_min + rng.gen::<f64>() * f.depth(),
        ));
        amplitudes.push(lo * (hi / lo).powf(rng.gen::<f64>()));
    }
    GroundTruthScene::new(frame_id, positions, amplitudes)
}
