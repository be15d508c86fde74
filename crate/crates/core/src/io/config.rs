//! TOML run configuration.
//!
//! Only `[acquisition]` with `speed_of_sound`, `sample_rate` and
//! `center_frequency` is required. Everything else has a default:
//!
//! ```toml
//! seed = 0
//!
//! [acquisition]
//! speed_of_sound = 1540.0
//! sample_rate = 62.5e6
//! center_frequency = 7.8125e6
//! num_samples = 1280
//! # transmit_delay_offset = 1.4e-7  # seconds; calibrated from the pulse if absent
//!
//! [array]
//! elements = 128
//! pitch = 1e-4
//! virtual_source = [0.0, 0.0]
//!
//! [pulse]
//! shape = "memgo"        # or "raised_cosine"
//! cycles = 3.0
//! eta = 0.5
//!
//! [noise]
//! # clutter_db = -20.0   # absent disables noise
//! amplitude_db = -10.0
//! power_db = 0.0
//! bandwidth_factor = 1.0
//! smoothing_sigma = 1.5
//! rf_noise_factor = 4.0
//!
//! [scene]
//! bubbles = 5
//! x_range = [-2.5e-3, 2.5e-3]
//! z_range = [7.5e-3, 12.5e-3]
//! amplitude_range = [0.5, 1.0]
//! spherical_spreading = false
//!
//! [pipeline]
//! channels = "0..15"     # or a list; absent uses every element
//! max_gap = 2
//! reprojection_wavelengths = 0.5
//! min_observations = 3
//! bandwidth_wavelengths = 0.25
//! min_cluster_size = 2
//! condition_weighting = true
//! pairing = "chain"      # or "all"
//! # pairing_stride = 2
//! remove_dc = true
//! merge_fragments = true
//! track_vote = true
//!
//! [render]
//! pixel_wavelengths = 0.1
//! gamma = 1.0
//! # x_range and z_range default to the scene field
//! ```
//!
//! Channel specs are comma-separated items: `a`, `a-b`, `a..b` and `a..=b`
//! (all ranges inclusive), or `even:k` for `k` evenly spaced elements.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::GridConfig;
use crate::geometry::Pairing;
use crate::pipeline::{evenly_spaced_channels, PipelineConfig};
use crate::sim::{NoiseParams, PulseModel, SceneConfig, SimConfig};
use crate::types::{AcquisitionConfig, Region, TransducerGeometry, Vec2};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    acquisition: RawAcquisition,
    #[serde(default)]
    array: RawArray,
    #[serde(default)]
    pulse: RawPulse,
    #[serde(default)]
    noise: RawNoise,
    #[serde(default)]
    scene: RawScene,
    #[serde(default)]
    pipeline: RawPipeline,
    #[serde(default)]
    render: RawRender,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAcquisition {
    speed_of_sound: f64,
    sample_rate: f64,
    center_frequency: f64,
    #[serde(default = "default_num_samples")]
    num_samples: usize,
    transmit_delay_offset: Option<f64>,
}

fn default_num_samples() -> usize {
    1280
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawArray {
    elements: usize,
    pitch: f64,
    virtual_source: [f64; 2],
}

impl Default for RawArray {
    fn default() -> Self {
        Self { elements: 128, pitch: 1e-4, virtual_source: [0.0, 0.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseShapeName {
    Memgo,
    RaisedCosine,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPulse {
    shape: PulseShapeName,
    cycles: f64,
    eta: f64,
}

impl Default for RawPulse {
    fn default() -> Self {
        Self { shape: PulseShapeName::Memgo, cycles: 3.0, eta: 0.5 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawNoise {
    clutter_db: Option<f64>,
    amplitude_db: f64,
    power_db: f64,
    bandwidth_factor: f64,
    smoothing_sigma: f64,
    rf_noise_factor: f64,
}

impl Default for RawNoise {
    fn default() -> Self {
        let d = NoiseParams::default();
        Self {
            clutter_db: d.clutter_db,
            amplitude_db: d.amplitude_db,
            power_db: d.power_db,
            bandwidth_factor: d.bandwidth_factor,
            smoothing_sigma: d.smoothing_sigma,
            rf_noise_factor: d.rf_noise_factor,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawScene {
    bubbles: usize,
    x_range: [f64; 2],
    z_range: [f64; 2],
    amplitude_range: [f64; 2],
    spherical_spreading: bool,
}

impl Default for RawScene {
    fn default() -> Self {
        Self {
            bubbles: 5,
            x_range: [-2.5e-3, 2.5e-3],
            z_range: [7.5e-3, 12.5e-3],
            amplitude_range: [0.5, 1.0],
            spherical_spreading: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawChannels {
    List(Vec<i64>),
    Spec(String),
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawPairing {
    Chain,
    All,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPipeline {
    channels: Option<RawChannels>,
    max_gap: usize,
    reprojection_wavelengths: f64,
    min_observations: usize,
    bandwidth_wavelengths: f64,
    min_cluster_size: usize,
    condition_weighting: bool,
    pairing: RawPairing,
    pairing_stride: Option<usize>,
    remove_dc: bool,
    merge_fragments: bool,
    track_vote: bool,
}

impl Default for RawPipeline {
    fn default() -> Self {
        Self {
            channels: None,
            max_gap: 2,
            reprojection_wavelengths: 0.5,
            min_observations: 3,
            bandwidth_wavelengths: 0.25,
            min_cluster_size: 2,
            condition_weighting: true,
            pairing: RawPairing::Chain,
            pairing_stride: None,
            remove_dc: true,
            merge_fragments: true,
            track_vote: true,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRender {
    pixel_wavelengths: f64,
    gamma: f64,
    x_range: Option<[f64; 2]>,
    z_range: Option<[f64; 2]>,
}

impl Default for RawRender {
    fn default() -> Self {
        Self { pixel_wavelengths: 0.1, gamma: 1.0, x_range: None, z_range: None }
    }
}

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    /// Acquisition of the full array, with the transmit offset resolved.
    pub acquisition: AcquisitionConfig,
    /// True when the transmit offset was calibrated rather than given.
    pub offset_calibrated: bool,
    pub geometry: TransducerGeometry,
    pub pulse: PulseModel,
    pub pulse_shape: PulseShapeName,
    pub noise: NoiseParams,
    pub scene: SceneConfig,
    pub spherical_spreading: bool,
    /// Active channel subset; `None` means every element.
    pub channels: Option<Vec<usize>>,
    pub pipeline: PipelineConfig,
    pub render: GridConfig,
}

/// The configuration used when no file is given.
pub const DEFAULT_CONFIG: &str = "[acquisition]
speed_of_sound = 1540.0
sample_rate = 62.5e6
center_frequency = 7.8125e6
";

fn field(name: &str, v: f64, ok: bool) -> Result<f64> {
    if ok && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Validation(format!("invalid {name}: {v}")))
    }
}

fn range(name: &str, r: [f64; 2]) -> Result<(f64, f64)> {
    if r[0].is_finite() && r[1].is_finite() && r[0] < r[1] {
        Ok((r[0], r[1]))
    } else {
        Err(Error::Validation(format!("{name} must be an increasing pair, got {r:?}")))
    }
}

fn as_validation(e: Error) -> Error {
    match e {
        Error::Validation(_) => e,
        other => Error::Validation(other.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        Self::resolve(raw)
    }

    pub fn standard() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("built-in config is valid")
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let a = &raw.acquisition;
        if raw.array.elements < 2 {
            return Err(Error::Validation(format!("array needs at least 2 elements, got {}", raw.array.elements)));
        }
        let mut acquisition = AcquisitionConfig {
            speed_of_sound: a.speed_of_sound,
            sample_rate: a.sample_rate,
            center_frequency: a.center_frequency,
            num_channels: raw.array.elements,
            num_samples: a.num_samples,
            transmit_delay_offset: a.transmit_delay_offset.unwrap_or(0.0),
        };
        acquisition.validate().map_err(as_validation)?;
        field("array.pitch", raw.array.pitch, raw.array.pitch > 0.0)?;
        let mut geometry = TransducerGeometry::linear_array(raw.array.elements, raw.array.pitch);
        geometry.virtual_source = Vec2::new(raw.array.virtual_source[0], raw.array.virtual_source[1]);
        geometry.validate(raw.array.elements).map_err(as_validation)?;

        let p = &raw.pulse;
        field("pulse.cycles", p.cycles, p.cycles > 0.0)?;
        let pulse = match p.shape {
            PulseShapeName::Memgo => {
                field("pulse.eta", p.eta, (0.0..=1.0).contains(&p.eta))?;
                PulseModel::memgo(&acquisition, p.cycles, p.eta)
            }
            PulseShapeName::RaisedCosine => PulseModel::raised_cosine(&acquisition, p.cycles),
        };
        pulse.validate().map_err(as_validation)?;

        let n = &raw.noise;
        let noise = NoiseParams {
            clutter_db: n.clutter_db,
            amplitude_db: n.amplitude_db,
            power_db: n.power_db,
            bandwidth_factor: n.bandwidth_factor,
            smoothing_sigma: n.smoothing_sigma,
            rf_noise_factor: n.rf_noise_factor,
            rng_seed: raw.seed,
        };
        noise.validate().map_err(as_validation)?;

        let s = &raw.scene;
        let (x_min, x_max) = range("scene.x_range", s.x_range)?;
        let (z_min, z_max) = range("scene.z_range", s.z_range)?;
        let [amp_lo, amp_hi] = s.amplitude_range;
        if !(amp_lo > 0.0 && amp_hi >= amp_lo && amp_hi.is_finite()) {
            return Err(Error::Validation(format!("scene.amplitude_range must be positive and ordered, got {:?}", s.amplitude_range)));
        }
        let scene = SceneConfig {
            num_bubbles: s.bubbles,
            field: Region { x_min, x_max, z_min, z_max },
            amplitude_range: (amp_lo, amp_hi),
        };

        let q = &raw.pipeline;
        let channels = match &q.channels {
            None => None,
            Some(RawChannels::List(list)) => {
                let list = list
                    .iter()
                    .map(|&c| usize::try_from(c).map_err(|_| Error::Validation(format!("negative channel {c}"))))
                    .collect::<Result<Vec<_>>>()?;
                Some(check_channels(list, raw.array.elements)?)
            }
            Some(RawChannels::Spec(spec)) => Some(parse_channel_spec(spec, raw.array.elements)?),
        };
        let wavelength = acquisition.wavelength();
        field("pipeline.reprojection_wavelengths", q.reprojection_wavelengths, q.reprojection_wavelengths > 0.0)?;
        field("pipeline.bandwidth_wavelengths", q.bandwidth_wavelengths, q.bandwidth_wavelengths > 0.0)?;
        if q.max_gap == 0 || q.min_observations < 2 || q.pairing_stride == Some(0) {
            return Err(Error::Validation(
                "max_gap and pairing_stride must be >= 1 and min_observations >= 2".into(),
            ));
        }
        let (mut pipeline, calibration) = PipelineConfig::for_pulse(&acquisition, &pulse)?;
        pipeline.toa.max_gap = q.max_gap;
        pipeline.toa.reprojection_threshold = q.reprojection_wavelengths * wavelength;
        pipeline.toa.min_observations = q.min_observations;
        pipeline.cluster.bandwidth = q.bandwidth_wavelengths * wavelength;
        pipeline.cluster.min_cluster_size = q.min_cluster_size;
        pipeline.cluster.condition_weighting = q.condition_weighting;
        pipeline.geometry.pairing = match q.pairing {
            RawPairing::Chain => Pairing::AdjacentChain { stride: q.pairing_stride },
            RawPairing::All => Pairing::AllPairs,
        };
        pipeline.remove_dc = q.remove_dc;
        pipeline.toa.merge_fragments = q.merge_fragments;
        pipeline.track_vote = q.track_vote;
        pipeline.cluster.validate().map_err(as_validation)?;

        let r = &raw.render;
        let (rx0, rx1) = range("render.x_range", r.x_range.unwrap_or([x_min, x_max]))?;
        let (rz0, rz1) = range("render.z_range", r.z_range.unwrap_or([z_min, z_max]))?;
        field("render.pixel_wavelengths", r.pixel_wavelengths, r.pixel_wavelengths > 0.0)?;
        let render = GridConfig::covering(rx0, rx1, rz0, rz1, r.pixel_wavelengths * wavelength, r.gamma)
            .map_err(as_validation)?;

        let offset_calibrated = a.transmit_delay_offset.is_none();
        if offset_calibrated {
            acquisition.transmit_delay_offset = calibration.onset_offset;
        }

        Ok(Self {
            seed: raw.seed,
            acquisition,
            offset_calibrated,
            geometry,
            pulse,
            pulse_shape: p.shape,
            noise,
            scene,
            spherical_spreading: s.spherical_spreading,
            channels,
            pipeline,
            render,
        })
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            acquisition: self.acquisition,
            field: self.scene.field,
            spherical_spreading: self.spherical_spreading,
        }
    }

    /// Active channels, defaulting to every element.
    pub fn active_channels(&self) -> Vec<usize> {
        self.channels.clone().unwrap_or_else(|| (0..self.acquisition.num_channels).collect())
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn check_channels(list: Vec<usize>, total: usize) -> Result<Vec<usize>> {
    if list.len() < 2 {
        return Err(Error::Validation(format!("channel subset needs at least 2 channels, got {}", list.len())));
    }
    let mut seen = vec![false; total];
    for &c in &list {
        if c >= total {
            return Err(Error::Validation(format!("channel {c} out of range for {total} elements")));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::Validation(format!("duplicate channel {c}")));
        }
    }
    Ok(list)
}

/// Parses a channel spec such as `0..15`, `3,5,9-12` or `even:16`.
pub fn parse_channel_spec(spec: &str, total: usize) -> Result<Vec<usize>> {
    let bad = || Error::Validation(format!("bad channel spec {spec:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let spec = spec.trim();
    if let Some(k) = spec.strip_prefix("even:") {
        return evenly_spaced_channels(total, num(k)?).map_err(as_validation);
    }
    let mut list = Vec::new();
    for item in spec.split(',') {
        let bounds = ["..=", "..", "-"].iter().find_map(|sep| item.split_once(sep));
        match bounds {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(bad());
                }
                list.extend(a..=b);
            }
            None => list.push(num(item)?),
        }
    }
    check_channels(list, total)
}
