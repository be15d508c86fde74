//! Arrival-time ellipses and their pairwise intersection.

mod conic;
mod intersect;
pub mod poly;

pub use conic::{build_ellipse, ellipse_to_quadratic, EllipseSpec, QuadraticCurve};
pub use intersect::{intersect_detailed, intersect_ellipses, Intersection, RESIDUAL_TOL};

use crate::error::Error;
use crate::toa::EchoTrack;
use crate::types::{AcquisitionConfig, TransducerGeometry, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Observations ordered along the array, each paired with the one
    /// `stride` positions further. `None` picks `max(1, len / 2)`, half the track aperture.
    AdjacentChain { stride: Option<usize> },
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryConfig {
    pub pairing: Pairing,
    /// Candidates must satisfy `|x| <= x_max` and `0 < z <= z_max`.
    pub x_max: f64,
    pub z_max: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            pairing: Pairing::AdjacentChain { stride: None },
            x_max: 0.02,
            z_max: 0.04,
        }
    }
}

impl GeometryConfig {
    pub fn in_field(&self, p: &Vec2) -> bool {
        p.y > 0.0 && p.y <= self.z_max && p.x.abs() <= self.x_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationCandidate {
    pub position: Vec2,
    /// Channel indices of the two ellipses.
    pub channel_pair: (usize, usize),
    pub track_id: usize,
    /// Round-trip path lengths (m) of the two ellipses.
    pub path_lengths: (f64, f64),
    /// Crossing conditioning, see [`Intersection::condition`].
    pub condition: f64,
}

impl LocalizationCandidate {
    /// Largest focal-identity violation (m) over both generating ellipses.
    pub fn focal_error(&self, geometry: &TransducerGeometry) -> f64 {
        let (n1, n2) = self.channel_pair;
        let e1 = (geometry.round_trip(&self.position, n1) - self.path_lengths.0).abs();
        let e2 = (geometry.round_trip(&self.position, n2) - self.path_lengths.1).abs();
        e1.max(e2)
    }
}

fn pairs(len: usize, pairing: Pairing) -> Vec<(usize, usize)> {
    match pairing {
        Pairing::AllPairs => (0..len).flat_map(|i| (i + 1..len).map(move |j| (i, j))).collect(),
        Pairing::AdjacentChain { stride } => {
            let stride = stride.unwrap_or((len / 2).max(1)).max(1);
            (0..len.saturating_sub(stride)).map(|i| (i, i + stride)).collect()
        }
    }
}

/// Intersects the arrival-time ellipses of one track and keeps in-field
/// points. Degenerate or ill-conditioned pairs contribute nothing.
pub fn localize_track(
    track_id: usize,
    track: &EchoTrack,
    geometry: &TransducerGeometry,
    acq: &AcquisitionConfig,
    config: &GeometryConfig,
) -> Vec<LocalizationCandidate> {
    let mut obs: Vec<_> = track.observations.iter().collect();
    obs.sort_by(|a, b| {
        let (pa, pb) = (geometry.receivers[a.channel_index], geometry.receivers[b.channel_index]);
        pa.x.total_cmp(&pb.x).then(pa.y.total_cmp(&pb.y))
    });
    let ellipses: Vec<Option<(EllipseSpec, QuadraticCurve)>> = obs
        .iter()
        .map(|o| {
            build_ellipse(o.toa, geometry.receivers[o.channel_index], geometry.virtual_source, acq)
                .ok()
                .map(|e| (e, ellipse_to_quadratic(&e)))
        })
        .collect();

    let mut out = Vec::new();
    for (i, j) in pairs(obs.len(), config.pairing) {
        let (Some((ei, qi)), Some((ej, qj))) = (&ellipses[i], &ellipses[j]) else {
            continue;
        };
        let points = match intersect_detailed(qi, qj) {
            Ok(p) => p,
            Err(Error::InfiniteIntersections | Error::IllConditioned { .. }) => continue,
            Err(e) => {
                log::debug!("pair ({i}, {j}) of track {track_id}: {e}");
                continue;
            }
        };
        for p in points.into_iter().filter(|p| config.in_field(&p.point)) {
            out.push(LocalizationCandidate {
                position: p.point,
                channel_pair: (obs[i].channel_index, obs[j].channel_index),
                track_id,
                path_lengths: (ei.path_length(), ej.path_length()),
                condition: p.condition,
            });
        }
    }
    out
}
