//! Per-frame localization: fit, match, refine, intersect, cluster.

use std::time::{Duration, Instant};

use crate::cluster::{cluster_candidates, ClusterConfig, MBLocation};
use crate::error::{Error, Result};
use crate::geometry::{localize_track, GeometryConfig, LocalizationCandidate};
use crate::signal::{fit_channel, ChannelEchoSet, FitConfig};
use crate::sim::{calibrate_pulse, PulseCalibration, PulseModel};
use crate::toa::{build_tracks, PhaseSource, ToaConfig};
use crate::types::{AcquisitionConfig, RFFrame, TransducerGeometry};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub fit: FitConfig,
    pub toa: ToaConfig,
    pub geometry: GeometryConfig,
    pub cluster: ClusterConfig,
    /// Subtract each channel's mean before fitting.
    pub remove_dc: bool,
    /// Keep only locations that some track sends most of its candidates to.
    pub track_vote: bool,
}

impl PipelineConfig {
    /// Defaults for a 3-cycle pulse, with phase refinement from the
    /// reference channel since no pulse calibration is available.
    pub fn for_acquisition(acq: &AcquisitionConfig) -> Self {
        Self {
            fit: FitConfig::for_acquisition(acq, 3.0, 0.25),
            toa: ToaConfig {
                max_gap: 2,
                merge_fragments: true,
                ..ToaConfig::for_acquisition(acq)
            },
            geometry: GeometryConfig::default(),
            cluster: ClusterConfig::for_wavelength(acq.wavelength()),
            remove_dc: true,
            track_vote: true,
        }
    }

    /// Defaults for a known transmit pulse, with carrier-locked arrivals.
    /// The returned calibration holds the matching transmit delay offset.
    pub fn for_pulse(acq: &AcquisitionConfig, pulse: &PulseModel) -> Result<(Self, PulseCalibration)> {
        let mut cfg = Self::for_acquisition(acq);
        cfg.fit = FitConfig::for_acquisition(acq, pulse.num_cycles, 0.25);
        let cal = calibrate_pulse(pulse, acq, &cfg.fit)?;
        cfg.toa.phase_source = PhaseSource::CarrierLocked {
            envelope_lead: cal.envelope_lead,
        };
        Ok((cfg, cal))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub fit: Duration,
    pub matching: Duration,
    pub intersection: Duration,
    pub clustering: Duration,
}

impl std::ops::AddAssign for StageTimings {
    fn add_assign(&mut self, o: Self) {
        self.fit += o.fit;
        self.matching += o.matching;
        self.intersection += o.intersection;
        self.clustering += o.clustering;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameStats {
    pub echoes: usize,
    pub tracks: usize,
    pub candidates: usize,
    pub clusters: usize,
    /// Channels whose fit hit a numerical failure and fell back to the last
    /// valid parameters.
    pub diverged_fits: usize,
    /// Largest focal-identity violation over all candidates, in meters.
    pub max_focal_error: f64,
    pub timings: StageTimings,
}

impl FrameStats {
    pub fn merge(&mut self, o: &FrameStats) {
        self.echoes += o.echoes;
        self.tracks += o.tracks;
        self.candidates += o.candidates;
        self.clusters += o.clusters;
        self.diverged_fits += o.diverged_fits;
        self.max_focal_error = self.max_focal_error.max(o.max_focal_error);
        self.timings += o.timings;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub frame_id: u64,
    pub locations: Vec<MBLocation>,
    /// Candidates with channel pairs indexing the frame's channels.
    pub candidates: Vec<LocalizationCandidate>,
    pub stats: FrameStats,
}

/// Localizer bound to an acquisition, an array and an active channel
/// subset.
#[derive(Debug, Clone)]
pub struct Localizer {
    /// Acquisition of the incoming frames (all channels).
    pub acquisition: AcquisitionConfig,
    /// Receivers of the active channels only.
    pub geometry: TransducerGeometry,
    /// Active channels as indices into the incoming frames.
    pub channels: Vec<usize>,
    pub config: PipelineConfig,
}

impl Localizer {
    /// `channels` of `None` uses every channel.
    pub fn new(
        acquisition: AcquisitionConfig,
        full_geometry: &TransducerGeometry,
        channels: Option<Vec<usize>>,
        config: PipelineConfig,
    ) -> Result<Self> {
        acquisition.validate()?;
        full_geometry.validate(acquisition.num_channels)?;
        config.cluster.validate()?;
        let channels = channels.unwrap_or_else(|| (0..acquisition.num_channels).collect());
        if channels.len() < 2 {
            return Err(Error::Validation("at least two active channels are needed".into()));
        }
        let geometry = full_geometry.subset(&channels)?;
        Ok(Self {
            acquisition,
            geometry,
            channels,
            config,
        })
    }

    fn active_acquisition(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            num_channels: self.channels.len(),
            ..self.acquisition
        }
    }

    pub fn localize(&self, frame: &RFFrame) -> Result<FrameOutput> {
        if !frame.matches(&self.acquisition) {
            return Err(Error::Validation(format!(
                "frame {} is {} x {}, expected {} x {}",
                frame.frame_id,
                frame.num_channels(),
                frame.num_samples(),
                self.acquisition.num_channels,
                self.acquisition.num_samples
            )));
        }
        let acq = self.active_acquisition();
        let cfg = &self.config;
        let mut stats = FrameStats::default();

        let t0 = Instant::now();
        let mut echo_sets: Vec<ChannelEchoSet> = Vec::with_capacity(self.channels.len());
        for (active, &n) in self.channels.iter().enumerate() {
            let mut trace = frame.channel(n).to_vec();
            if cfg.remove_dc && !trace.is_empty() {
                let mean = trace.iter().sum::<f64>() / trace.len() as f64;
                trace.iter_mut().for_each(|v| *v -= mean);
            }
            let set = match fit_channel(active, &trace, &cfg.fit) {
                Ok(set) => set,
                Err(Error::FitDiverged { iterations, last_valid }) => {
                    log::warn!("frame {} channel {n}: fit diverged after {iterations} iterations", frame.frame_id);
                    stats.diverged_fits += 1;
                    ChannelEchoSet {
                        channel_index: active,
                        components: last_valid,
                        fit_residual: f64::NAN,
                    }
                }
                Err(e) => return Err(e),
            };
            stats.echoes += set.components.len();
            echo_sets.push(set);
        }
        stats.timings.fit = t0.elapsed();

        let t1 = Instant::now();
        let tracks = build_tracks(&echo_sets, &self.geometry, &acq, &cfg.toa)?;
        stats.tracks = tracks.len();
        stats.timings.matching = t1.elapsed();

        let t2 = Instant::now();
        let candidates: Vec<LocalizationCandidate> = tracks
            .iter()
            .enumerate()
            .flat_map(|(id, t)| localize_track(id, t, &self.geometry, &acq, &cfg.geometry))
            .collect();
        stats.candidates = candidates.len();
        stats.max_focal_error = candidates
            .iter()
            .map(|c| c.focal_error(&self.geometry))
            .fold(0.0, f64::max);
        stats.timings.intersection = t2.elapsed();

        let t3 = Instant::now();
        let mut locations = cluster_candidates(&candidates, &cfg.cluster)?;
        if cfg.track_vote {
            locations = track_vote(locations, &candidates, cfg.cluster.bandwidth);
        }
        stats.clusters = locations.len();
        stats.timings.clustering = t3.elapsed();

        // Report channel pairs as indices into the frame.
        let candidates = candidates
            .into_iter()
            .map(|c| LocalizationCandidate {
                channel_pair: (self.channels[c.channel_pair.0], self.channels[c.channel_pair.1]),
                ..c
            })
            .collect();

        log::debug!(
            "frame {}: {} echoes, {} tracks, {} candidates, {} locations",
            frame.frame_id,
            stats.echoes,
            stats.tracks,
            stats.candidates,
            stats.clusters
        );
        Ok(FrameOutput {
            frame_id: frame.frame_id,
            locations,
            candidates,
            stats,
        })
    }
}

/// Drops locations that are not the main destination of any track.
///
/// A track follows one bubble, so the candidates it produces away from its
/// main location come from a mismatched echo. Each candidate is assigned to
/// the nearest location within `radius`; each track votes for the location
/// holding most of its candidates, ties going to the higher support and
/// then to the lower index.
pub fn track_vote(locations: Vec<MBLocation>, candidates: &[LocalizationCandidate], radius: f64) -> Vec<MBLocation> {
    let num_tracks = candidates.iter().map(|c| c.track_id + 1).max().unwrap_or(0);
    let mut counts = vec![vec![0usize; locations.len()]; num_tracks];
    for c in candidates {
        let nearest = locations
            .iter()
            .enumerate()
            .map(|(i, l)| (i, (l.position - c.position).norm()))
            .filter(|(_, d)| *d <= radius)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((i, _)) = nearest {
            counts[c.track_id][i] += 1;
        }
    }
    let mut voted = vec![false; locations.len()];
    for row in &counts {
        let best = (0..locations.len())
            .filter(|&i| row[i] > 0)
            .max_by(|&a, &b| {
                row[a]
                    .cmp(&row[b])
                    .then(locations[a].support.cmp(&locations[b].support))
                    .then(b.cmp(&a))
            });
        if let Some(i) = best {
            voted[i] = true;
        }
    }
    locations.into_iter().zip(voted).filter_map(|(l, v)| v.then_some(l)).collect()
}

/// Evenly spaced subset of `k` out of `total` channels, centered on the
/// array.
pub fn evenly_spaced_channels(total: usize, k: usize) -> Result<Vec<usize>> {
    if k < 2 || k > total {
        return Err(Error::Validation(format!("cannot pick {k} of {total} channels")));
    }
    let stride = total / k;
    let start = (total - 1 - (k - 1) * stride) / 2;
    Ok((0..k).map(|i| start + i * stride).collect())
}
