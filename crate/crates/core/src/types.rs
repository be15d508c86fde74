//! Shared domain types.
//!
//! Coordinates are `(x, z)` in meters: `x` runs laterally along the array,
//! `z` is depth and grows away from the array, which sits at `z = 0`. Times
//! are in seconds unless a field says otherwise. Wavelength-relative
//! quantities are only formed at the reporting boundary.

use crate::error::{Error, Result};

/// 2-D point or direction `(x, z)` in meters.
pub type Vec2 = nalgebra::Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionConfig {
    /// m/s
    pub speed_of_sound: f64,
    /// samples/s
    pub sample_rate: f64,
    /// Hz
    pub center_frequency: f64,
    pub num_channels: usize,
    pub num_samples: usize,
    /// Offset in seconds between the fitted echo position and the true
    /// onset of the echo. Subtracted from every time of arrival.
    pub transmit_delay_offset: f64,
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("speed_of_sound", self.speed_of_sound),
            ("sample_rate", self.sample_rate),
            ("center_frequency", self.center_frequency),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.num_channels < 2 {
            return Err(Error::Validation(format!(
                "at least 2 channels are required, got {}",
                self.num_channels
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::Validation("num_samples must be positive".into()));
        }
        if !self.transmit_delay_offset.is_finite() {
            return Err(Error::Validation("transmit_delay_offset must be finite".into()));
        }
        Ok(())
    }

    /// Carrier wavelength in meters.
    pub fn wavelength(&self) -> f64 {
        self.speed_of_sound / self.center_frequency
    }

    /// Carrier angular frequency in radians per sample.
    pub fn omega_per_sample(&self) -> f64 {
        std::f64::consts::TAU * self.center_frequency / self.sample_rate
    }

    /// Duration of one carrier period in seconds.
    pub fn carrier_period(&self) -> f64 {
        1.0 / self.center_frequency
    }

    /// Duration of the recorded window in seconds.
    pub fn record_duration(&self) -> f64 {
        self.num_samples as f64 / self.sample_rate
    }
}

/// Converts a round-trip time of arrival into a path length.
pub fn toa_to_distance(toa: f64, config: &AcquisitionConfig) -> Result<f64> {
    if !(toa >= 0.0) {
        return Err(Error::InvalidArgument(format!("time of arrival must be >= 0, got {toa}")));
    }
    Ok(toa * config.speed_of_sound)
}

pub fn distance_to_toa(distance: f64, config: &AcquisitionConfig) -> Result<f64> {
    if !(distance >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be >= 0, got {distance}")));
    }
    Ok(distance / config.speed_of_sound)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransducerGeometry {
    pub receivers: Vec<Vec2>,
    /// Effective transmit origin; one focus of every arrival-time ellipse.
    pub virtual_source: Vec2,
}

impl TransducerGeometry {
    /// Uniform linear array on `z = 0` centered on `x = 0`, with the virtual
    /// source at the array center.
    pub fn linear_array(num_elements: usize, pitch: f64) -> Self {
        let half = (num_elements as f64 - 1.0) / 2.0;
        let receivers = (0..num_elements)
            .map(|i| Vec2::new((i as f64 - half) * pitch, 0.0))
            .collect();
        Self {
            receivers,
            virtual_source: Vec2::zeros(),
        }
    }

    pub fn num_channels(&self) -> usize {
        self.receivers.len()
    }

    pub fn validate(&self, num_channels: usize) -> Result<()> {
        if self.receivers.len() != num_channels {
            return Err(Error::Validation(format!(
                "geometry has {} receivers but acquisition declares {num_channels} channels",
                self.receivers.len()
            )));
        }
        if self.receivers.iter().chain([&self.virtual_source]).any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Validation("non-finite transducer position".into()));
        }
        for (i, a) in self.receivers.iter().enumerate() {
            for (j, b) in self.receivers.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(Error::Validation(format!(
                        "receivers {i} and {j} share the same position"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Geometry restricted to the given channel indices, in the given order.
    pub fn subset(&self, channels: &[usize]) -> Result<Self> {
        let receivers = channels
            .iter()
            .map(|&c| {
                self.receivers.get(c).copied().ok_or_else(|| {
                    Error::Validation(format!(
                        "channel {c} out of range (array has {})",
                        self.receivers.len()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            receivers,
            virtual_source: self.virtual_source,
        })
    }

    /// Round-trip path length source -> `point` -> receiver `channel`.
    pub fn round_trip(&self, point: &Vec2, channel: usize) -> f64 {
        (point - self.virtual_source).norm() + (point - self.receivers[channel]).norm()
    }
}

/// Axis-aligned rectangle in the imaging plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Region {
    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.z_min && p.y <= self.z_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn depth(&self) -> f64 {
        self.z_max - self.z_min
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.z_min, self.z_max].iter().all(|v| v.is_finite());
        if !finite || self.width() <= 0.0 || self.depth() <= 0.0 {
            return Err(Error::Validation(format!("region has no area: {self:?}")));
        }
        Ok(())
    }
}

/// One acquisition: `num_channels` rows of `num_samples` RF samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RFFrame {
    pub frame_id: u64,
    num_channels: usize,
    num_samples: usize,
    samples: Vec<f64>,
}

impl RFFrame {
    pub fn zeros(frame_id: u64, num_channels: usize, num_samples: usize) -> Self {
        Self {
            frame_id,
            num_channels,
            num_samples,
            samples: vec![0.0; num_channels * num_samples],
        }
    }

    /// Builds a frame from row-major samples.
    pub fn from_samples(
        frame_id: u64,
        num_channels: usize,
        num_samples: usize,
        samples: Vec<f64>,
    ) -> Result<Self> {
        if samples.len() != num_channels * num_samples {
            return Err(Error::Validation(format!(
                "expected {}x{} samples, got {}",
                num_channels,
                num_samples,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("RF frame contains non-finite samples".into()));
        }
        Ok(Self {
            frame_id,
            num_channels,
            num_samples,
            samples,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn channel(&self, n: usize) -> &[f64] {
        &self.samples[n * self.num_samples..(n + 1) * self.num_samples]
    }

    pub fn channel_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.samples[n * self.num_samples..(n + 1) * self.num_samples]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn matches(&self, config: &AcquisitionConfig) -> bool {
        self.num_channels == config.num_channels && self.num_samples == config.num_samples
    }

    /// Frame holding only the listed channels, in order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let mut samples = Vec::with_capacity(channels.len() * self.num_samples);
        for &c in channels {
            if c >= self.num_channels {
                return Err(Error::Validation(format!(
                    "channel {c} out of range (frame has {})",
                    self.num_channels
                )));
            }
            samples.extend_from_slice(self.channel(c));
        }
        Ok(Self {
            frame_id: self.frame_id,
            num_channels: channels.len(),
            num_samples: self.num_samples,
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthScene {
    pub frame_id: u64,
    pub positions: Vec<Vec2>,
    pub amplitudes: Vec<f64>,
}

impl GroundTruthScene {
    pub fn new(frame_id: u64, positions: Vec<Vec2>, amplitudes: Vec<f64>) -> Result<Self> {
        if positions.len() != amplitudes.len() {
            return Err(Error::InvalidScene(format!(
                "{} positions but {} amplitudes",
                positions.len(),
                amplitudes.len()
            )));
        }
        Ok(Self {
            frame_id,
            positions,
            amplitudes,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acq(c: f64) -> AcquisitionConfig {
        AcquisitionConfig {
            speed_of_sound: c,
            sample_rate: 62.5e6,
            center_frequency: 7.8125e6,
            num_channels: 2,
            num_samples: 16,
            transmit_delay_offset: 0.0,
        }
    }

    #[test]
    fn toa_distance_examples() {
        assert_eq!(toa_to_distance(0.0, &acq(1540.0)).unwrap(), 0.0);
        assert!((toa_to_distance(1e-5, &acq(1540.0)).unwrap() - 0.0154).abs() < 1e-15);
        assert!((toa_to_distance(2e-6, &acq(1500.0)).unwrap() - 0.003).abs() < 1e-15);
        assert!(matches!(
            toa_to_distance(-1e-9, &acq(1540.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn wavelength_matches_reference() {
        let a = acq(1540.0);
        assert!((a.wavelength() - 197.12e-6).abs() < 1e-9);
        assert!((a.wavelength() * a.center_frequency / a.speed_of_sound - 1.0).abs() < 1e-9);
    }

    #[test]
    fn acquisition_rejects_single_channel() {
        let mut a = acq(1540.0);
        a.num_channels = 1;
        assert!(a.validate().is_err());
        a.num_channels = 2;
        a.sample_rate = 0.0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn geometry_rejects_duplicate_receivers() {
        let mut g = TransducerGeometry::linear_array(4, 1e-4);
        assert!(g.validate(4).is_ok());
        assert!(g.validate(5).is_err());
        g.receivers[2] = g.receivers[1];
        assert!(g.validate(4).is_err());
    }

    #[test]
    fn frame_rejects_non_finite() {
        assert!(RFFrame::from_samples(0, 2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
        assert!(RFFrame::from_samples(0, 2, 2, vec![0.0; 3]).is_err());
        let f = RFFrame::from_samples(3, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(f.select_channels(&[1]).unwrap().samples(), &[3.0, 4.0]);
    }

    proptest::proptest! {
        #[test]
        fn distance_round_trip(toa in 0.0f64..1e-3, c in 1000.0f64..2000.0) {
            let a = acq(c);
            let back = distance_to_toa(toa_to_distance(toa, &a).unwrap(), &a).unwrap();
            proptest::prop_assert!((back - toa).abs() <= 2.0 * f64::EPSILON * toa.max(f64::MIN_POSITIVE));
        }
    }
}
