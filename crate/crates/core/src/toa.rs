//! Cross-channel echo correspondence and arrival-time refinement.
//!
//! Channels are walked in array order: starting from a reference echo, the
//! walk steps outward one channel at a time in both directions and picks,
//! among echoes whose index is within one of the last match, the one closest
//! to the expected arrival. The expectation is a linear extrapolation of
//! `mu` until two echoes are matched; after that it is the arrival predicted
//! from their ellipse intersection, which must then be met within the lag
//! slack. Candidates must respect the physical lag bound
//! `|dt| <= |u_a - u_b| / c + slack`.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{build_ellipse, ellipse_to_quadratic, intersect_ellipses};
use crate::signal::{ChannelEchoSet, EchoComponent};
use crate::types::{AcquisitionConfig, TransducerGeometry, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToAObservation {
    /// Index into the active geometry's receivers.
    pub channel_index: usize,
    /// Index of the echo within its channel's fitted set.
    pub echo_index: usize,
    /// Round-trip arrival time in seconds, onset-corrected.
    pub toa: f64,
    pub component: EchoComponent,
    /// Set when phase refinement moved the arrival by more than one carrier
    /// period, which points at a bad correspondence.
    pub phase_flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoTrack {
    pub reference_channel: usize,
    pub observations: Vec<ToAObservation>,
}

impl EchoTrack {
    pub fn reference(&self) -> Option<&ToAObservation> {
        self.observations.iter().find(|o| o.channel_index == self.reference_channel)
    }
}

/// Which component's phase drives the sub-sample correction.
///
/// The echo model's carrier is `cos(omega (t - mu) + phi)`, so the carrier
/// epoch is `mu - phi / omega` and a pulse delayed by `d` samples has its
/// phase lowered by `omega * d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseSource {
    /// `mu - phi_ref / omega_ref` with the reference channel's phase for
    /// every observation of the track.
    Reference,
    /// `mu - phi / omega` with each observation's own wrapped phase.
    Own,
    /// Each observation's own carrier epoch, shifted by whole carrier
    /// periods to sit `envelope_lead` samples before its envelope peak.
    /// Unlike `mu`, both the epoch and the envelope peak are fixed by the
    /// waveform, so the trade-off between `mu`, `sigma` and `eta` in the
    /// fit does not leak into the arrival.
    CarrierLocked { envelope_lead: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToaConfig {
    /// Channels the walk may skip over when a neighbor has no acceptable
    /// echo; 1 ends the track at the first miss.
    pub max_gap: usize,
    /// Extra lag allowance in seconds beyond the geometric bound.
    pub lag_slack: f64,
    /// Reprojection acceptance threshold in meters of round-trip path.
    pub reprojection_threshold: f64,
    pub phase_source: PhaseSource,
    /// Rejected tracks are reduced to their largest consistent subset
    /// instead of being dropped.
    pub prune_outliers: bool,
    /// Tracks shorter than this after pruning are dropped.
    pub min_observations: usize,
    /// Join tracks whose union passes the reprojection check, undoing
    /// walks that stopped early on one scatterer.
    pub merge_fragments: bool,
}

impl ToaConfig {
    pub fn for_acquisition(acq: &AcquisitionConfig) -> Self {
        Self {
            max_gap: 1,
            lag_slack: acq.carrier_period(),
            reprojection_threshold: 0.5 * acq.wavelength(),
            phase_source: PhaseSource::Reference,
            prune_outliers: true,
            min_observations: 3,
            merge_fragments: false,
        }
    }
}

/// Arrival time from an echo position alone.
fn coarse_toa(c: &EchoComponent, acq: &AcquisitionConfig) -> f64 {
    c.mu / acq.sample_rate - acq.transmit_delay_offset
}

/// Carrier-phase correction in samples.
fn phase_shift(c: &EchoComponent) -> f64 {
    c.wrapped_phase() / c.omega
}

/// Phase-refined arrival of `c` in samples, before the onset correction.
pub fn refined_arrival(c: &EchoComponent, reference: &EchoComponent, source: PhaseSource) -> f64 {
    match source {
        PhaseSource::Reference => c.mu - phase_shift(reference),
        PhaseSource::Own => c.mu - phase_shift(c),
        PhaseSource::CarrierLocked { envelope_lead } => {
            let period = std::f64::consts::TAU / c.omega;
            let epoch = c.mu - phase_shift(c);
            epoch + ((c.envelope_peak() - envelope_lead - epoch) / period).round() * period
        }
    }
}

fn valid_toa(toa: f64, acq: &AcquisitionConfig) -> bool {
    toa > 0.0 && toa < acq.record_duration()
}

/// Channel ranks in array order.
fn array_order(echo_sets: &[ChannelEchoSet], geometry: &TransducerGeometry) -> Vec<usize> {
    let mut order: Vec<usize> = (0..echo_sets.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = geometry.receivers[echo_sets[a].channel_index];
        let pb = geometry.receivers[echo_sets[b].channel_index];
        pa.x.total_cmp(&pb.x).then(pa.y.total_cmp(&pb.y))
    });
    order
}

struct Walker<'a> {
    sets: &'a [ChannelEchoSet],
    order: Vec<usize>,
    geometry: &'a TransducerGeometry,
    acq: &'a AcquisitionConfig,
    config: &'a ToaConfig,
    /// Refined arrivals per echo set and echo, when they do not depend on
    /// the reference.
    own_arrivals: Option<Vec<Vec<f64>>>,
}

impl Walker<'_> {
    fn arrival(&self, rank: usize, echo: usize, reference: &EchoComponent) -> f64 {
        match &self.own_arrivals {
            Some(a) => a[self.order[rank]][echo],
            None => refined_arrival(&self.sets[self.order[rank]].components[echo], reference, self.config.phase_source),
        }
    }

    fn receiver(&self, rank: usize) -> Vec2 {
        self.geometry.receivers[self.sets[self.order[rank]].channel_index]
    }

    fn mu(&self, rank: usize, echo: usize) -> f64 {
        self.sets[self.order[rank]].components[echo].mu
    }

    /// Builds the raw track around `(ref_rank, echo)`, skipping claimed
    /// echoes. Returns `(rank, echo)` pairs.
    fn walk(&self, ref_rank: usize, echo: usize, claimed: &HashSet<(usize, usize)>) -> Vec<(usize, usize)> {
        let mut members = vec![(ref_rank, echo)];
        for dir in [1isize, -1] {
            let mut last = (ref_rank, echo);
            let mut prev: Option<(usize, usize)> = None;
            loop {
                let position = self.provisional(ref_rank, &members);
                let mut found = None;
                for step in 1..=self.config.max_gap.max(1) {
                    let r = last.0 as isize + dir * step as isize;
                    if r < 0 || r as usize >= self.order.len() {
                        break;
                    }
                    let r = r as usize;
                    if let Some(k) = self.best_candidate(last, prev, position, (ref_rank, echo), r, claimed) {
                        found = Some((r, k));
                        break;
                    }
                }
                let Some(next) = found else { break };
                members.push(next);
                prev = Some(last);
                last = next;
            }
        }
        members
    }

    fn observation(&self, rank: usize, echo: usize, reference: &EchoComponent) -> ToAObservation {
        let set = &self.sets[self.order[rank]];
        let component = set.components[echo];
        ToAObservation {
            channel_index: set.channel_index,
            echo_index: echo,
            toa: self.arrival(rank, echo, reference) / self.acq.sample_rate - self.acq.transmit_delay_offset,
            component,
            phase_flagged: false,
        }
    }

    /// Scatterer position implied by the reference and the member farthest
    /// from it, using reference-phase arrival times.
    fn provisional(&self, ref_rank: usize, members: &[(usize, usize)]) -> Option<Vec2> {
        let &(far_rank, far_echo) = members.iter().max_by_key(|m| m.0.abs_diff(ref_rank))?;
        if far_rank == ref_rank {
            return None;
        }
        let reference = self.sets[self.order[ref_rank]].components[members[0].1];
        let obs: Vec<ToAObservation> = members.iter().map(|&(r, k)| self.observation(r, k, &reference)).collect();
        let (a, b) = (&obs[0], &self.observation(far_rank, far_echo, &reference));
        provisional_points(a, b, self.geometry, self.acq)
            .into_iter()
            .map(|p| (p, path_errors(&p, &obs, self.geometry, self.acq).fold(0.0, f64::max)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(p, _)| p)
    }

    /// Echo on channel `rank` continuing the track. With a provisional
    /// position the expected echo follows from geometry and must lie within
    /// the lag slack of it; otherwise `mu` is extrapolated linearly.
    fn best_candidate(
        &self,
        last: (usize, usize),
        prev: Option<(usize, usize)>,
        position: Option<Vec2>,
        reference: (usize, usize),
        rank: usize,
        claimed: &HashSet<(usize, usize)>,
    ) -> Option<usize> {
        let set = &self.sets[self.order[rank]];
        if set.components.is_empty() {
            return None;
        }
        let fs = self.acq.sample_rate;
        let mu_last = self.mu(last.0, last.1);
        let u_last = self.receiver(last.0);
        let u_cand = self.receiver(rank);
        let gate = ((u_cand - u_last).norm() / self.acq.speed_of_sound + self.config.lag_slack) * fs;
        let reference = &self.sets[self.order[reference.0]].components[reference.1];
        let arrival = |r: usize, k: usize| self.arrival(r, k, reference);
        let at_last = arrival(last.0, last.1);
        // Predicted refined arrival: from the provisional position, else
        // extrapolated along the track.
        let (predicted, tolerance) = match (position, prev) {
            (Some(p), _) => {
                let toa = self.geometry.round_trip(&p, set.channel_index) / self.acq.speed_of_sound;
                ((toa + self.acq.transmit_delay_offset) * fs, self.config.lag_slack * fs)
            }
            (None, Some(pr)) => {
                let u_prev = self.receiver(pr.0);
                let run = (u_last - u_prev).norm();
                let slope = if run > 0.0 { (at_last - arrival(pr.0, pr.1)) / run } else { 0.0 };
                (at_last + slope * (u_cand - u_last).norm(), self.config.lag_slack * fs)
            }
            (None, None) => (at_last, gate),
        };
        let miss = |k: usize| (arrival(rank, k) - predicted).abs();
        let lo = last.1.saturating_sub(1);
        let hi = (last.1 + 1).min(set.components.len() - 1);
        (lo..=hi)
            .filter(|&k| !claimed.contains(&(set.channel_index, k)))
            .filter(|&k| (set.components[k].mu - mu_last).abs() <= gate)
            .filter(|&k| miss(k) <= tolerance)
            .filter(|&k| valid_toa(coarse_toa(&set.components[k], self.acq), self.acq))
            .min_by(|&a, &b| miss(a).total_cmp(&miss(b)).then(a.cmp(&b)))
    }

    fn to_track(&self, ref_rank: usize, members: &[(usize, usize)]) -> EchoTrack {
        let mut observations: Vec<ToAObservation> = members
            .iter()
            .map(|&(rank, k)| {
                let set = &self.sets[self.order[rank]];
                let component = set.components[k];
                ToAObservation {
                    channel_index: set.channel_index,
                    echo_index: k,
                    toa: coarse_toa(&component, self.acq),
                    component,
                    phase_flagged: false,
                }
            })
            .collect();
        observations.sort_by_key(|o| o.channel_index);
        EchoTrack {
            reference_channel: self.sets[self.order[ref_rank]].channel_index,
            observations,
        }
    }

    /// Reference ranks from the array center outward.
    fn reference_ranks(&self) -> Vec<usize> {
        let center = (self.order.len() as f64 - 1.0) / 2.0;
        let mut ranks: Vec<usize> = (0..self.order.len()).collect();
        ranks.sort_by(|&a, &b| {
            (a as f64 - center)
                .abs()
                .total_cmp(&(b as f64 - center).abs())
                .then(a.cmp(&b))
        });
        ranks
    }
}

/// Groups echoes of different channels that belong to the same scatterer.
///
/// Every echo of every channel is tried as a reference, starting from the
/// array center. Each `(channel, echo)` pair ends up in at most one track.
/// `gap` bounds how many channels a walk may step over at once.
pub fn match_echoes(
    echo_sets: &[ChannelEchoSet],
    gap: usize,
    geometry: &TransducerGeometry,
    acq: &AcquisitionConfig,
    config: &ToaConfig,
) -> Result<Vec<EchoTrack>> {
    let cfg = ToaConfig {
        max_gap: gap,
        ..config.clone()
    };
    build(echo_sets, geometry, acq, &cfg, |t| Some(t))
}

/// Matching, phase refinement and reprojection checks in one pass, so that
/// echoes dropped from a track stay available to later tracks.
pub fn build_tracks(
    echo_sets: &[ChannelEchoSet],
    geometry: &TransducerGeometry,
    acq: &AcquisitionConfig,
    config: &ToaConfig,
) -> Result<Vec<EchoTrack>> {
    let tracks = build(echo_sets, geometry, acq, config, |raw| {
        let refined = phase_refine_toa(&raw, acq, config.phase_source).ok()?;
        let verdict = reproject_validate(&refined, geometry, acq, config.reprojection_threshold);
        let track = if verdict.accepted {
            refined
        } else if config.prune_outliers {
            prune_track(&refined, geometry, acq, config.reprojection_threshold)?
        } else {
            return None;
        };
        (track.observations.len() >= config.min_observations.max(2)).then_some(track)
    })?;
    Ok(if config.merge_fragments {
        merge_fragments(tracks, geometry, acq, config.reprojection_threshold)
    } else {
        tracks
    })
}

/// Repeatedly joins the pair of tracks with disjoint channels whose union
/// passes [`reproject_validate`] with the smallest residual. The merged
/// track keeps the reference of the longer part and takes the place of the
/// earlier one.
pub fn merge_fragments(
    mut tracks: Vec<EchoTrack>,
    geometry: &TransducerGeometry,
    acq: &AcquisitionConfig,
    threshold: f64,
) -> Vec<EchoTrack> {
    loop {
        let mut best: Option<(usize, usize, f64, EchoTrack)> = None;
        for i in 0..tracks.len() {
            for j in i + 1..tracks.len() {
                let (a, b) = (&tracks[i], &tracks[j]);
                if a.observations.iter().any(|o| b.observations.iter().any(|p| p.channel_index == o.channel_index)) {
                    continue;
                }
                let reference_channel = if b.observations.len() > a.observations.len() {
                    b.reference_channel
                } else {
                    a.reference_channel
                };
                let mut observations: Vec<ToAObservation> = a.observations.iter().chain(&b.observations).copied().collect();
                observations.sort_by_key(|o| o.channel_index);
                let union = EchoTrack {
                    reference_channel,
                    observations,
                };
                let verdict = reproject_validate(&union, geometry, acq, threshold);
                if verdict.accepted && best.as_ref().is_none_or(|b| verdict.residual < b.2) {
                    best = Some((i, j, verdict.residual, union));
                }
            }
        }
        let Some((i, j, _, union)) = best else {
            return tracks;
        };
        tracks[i] = union;
        tracks.remove(j);
    }
}

fn build(
    echo_sets: &[ChannelEchoSet],
    geometry: &TransducerGeometry,
    acq: &AcquisitionConfig,
    config: &ToaConfig,
    mut finish: impl FnMut(EchoTrack) -> Option<EchoTrack>,
) -> Result<Vec<EchoTrack>> {
    if config.max_gap == 0 {
        return Err(Error::InvalidArgument("gap must be >= 1".into()));
    }
    if let Some(bad) = echo_sets.iter().find(|s| s.channel_index >= geometry.num_channels()) {
        return Err(Error::InvalidArgument(format!(
            "echo set for channel {} but geometry has {} receivers",
            bad.channel_index,
            geometry.num_channels()
        )));
    }
    let walker = Walker {
        sets: echo_sets,
        order: array_order(echo_sets, geometry),
        geometry,
        acq,
        config,
        own_arrivals: (config.phase_source != PhaseSource::Reference).then(|| {
            echo_sets
                .iter()
                .map(|s| s.components.iter().map(|c| refined_arrival(c, c, config.phase_source)).collect())
                .collect()
        }),
    };
    let mut claimed: HashSet<(usize, usize)> = HashSet::new();
    let mut tracks = Vec::new();
    for ref_rank in walker.reference_ranks() {
        let set = &echo_sets[walker.order[ref_rank]];
        for k in 0..set.components.len() {
            if claimed.contains(&(set.channel_index, k)) || !valid_toa(coarse_toa(&set.components[k], acq), acq) {
                continue;
            }
            let members = walker.walk(ref_rank, k, &claimed);
            if members.len() < 2 {
                continue;
            }
            let Some(track) = finish(walker.to_track(ref_rank, &members)) else {
                continue;
            };
            for o in &track.observations {
                claimed.insert((o.channel_index, o.echo_index));
            }
            tracks.push(track);
        }
    }
    Ok(tracks)
}

/// Replaces every observation's arrival with its phase-refined value,
/// `toa = refined_arrival / fs - offset`.
pub fn phase_refine_toa(track: &EchoTrack, acq: &AcquisitionConfig, source: PhaseSource) -> Result<EchoTrack> {
    let reference = track
        .reference()
        .ok_or_else(|| Error::InvalidArgument("track lacks its reference observation".into()))?
        .component;
    if !(reference.omega > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference component has non-positive omega {}",
            reference.omega
        )));
    }
    let mut out = track.clone();
    for o in &mut out.observations {
        if source != PhaseSource::Reference && !(o.component.omega > 0.0) {
            return Err(Error::InvalidArgument("component has non-positive omega".into()));
        }
        let coarse = coarse_toa(&o.component, acq);
        o.toa = refined_arrival(&o.component, &reference, source) / acq.sample_rate - acq.transmit_delay_offset;
        let period = std::f64::consts::TAU / o.component.omega / acq.sample_rate;
        o.phase_flagged = (o.toa - coarse).abs() > period;
        if o.phase_flagged {
            log::debug!(
                "channel {} echo {}: phase correction exceeds one carrier period",
                o.channel_index,
                o.echo_index
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The provisional pair of ellipses has no point in front of the array.
    NoProvisionalPosition,
    /// Some channel disagrees with the provisional position.
    ReprojectionError,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub accepted: bool,
    /// Largest round-trip path mismatch in meters.
    pub residual: f64,
    pub position: Option<Vec2>,
    pub reason: Option<RejectReason>,
}

/// In-front intersections of the ellipses of two observations.
fn provisional_points(a: &ToAObservation, b: &ToAObservation, geometry: &TransducerGeometry, acq: &AcquisitionConfig) -> Vec<Vec2> {
    let src = geometry.virtual_source;
    let (Ok(ea), Ok(eb)) = (
        build_ellipse(a.toa, geometry.receivers[a.channel_index], src, acq),
        build_ellipse(b.toa, geometry.receivers[b.channel_index], src, acq),
    ) else {
        return Vec::new();
    };
    match intersect_ellipses(&ellipse_to_quadratic(&ea), &ellipse_to_quadratic(&eb)) {
        Ok(points) => points.into_iter().filter(|p| p.y > 0.0).collect(),
        Err(_) => Vec::new(),
    }
}

fn path_errors<'a>(
    p: &'a Vec2,
    obs: &'a [ToAObservation],
    geometry: &'a TransducerGeometry,
    acq: &'a AcquisitionConfig,
) -> impl Iterator<Item = f64> + 'a {
    obs.iter()
        .map(move |o| (geometry.round_trip(p, o.channel_index) - o.toa * acq.speed_of_sound).abs())
}

/// Triangulates from the widest-baseline pair and checks that every other
/// observation agrees within `threshold` meters of round-trip path.
/// Two-observation tracks pass with zero residual.
pub fn reproject_validate(
    track: &EchoTrack,
    geometry: &TransducerGeometry,
    acq: &AcquisitionConfig,
    threshold: f64,
) -> Validation {
    let obs = &track.observations;
    if obs.len() < 3 {
        return Validation {
            accepted: true,
            residual: 0.0,
            position: None,
            reason: None,
        };
    }
    let mut widest = (0, 1);
    let mut best = -1.0;
    for i in 0..obs.len() {
        for j in i + 1..obs.len() {
            let d = (geometry.receivers[obs[i].channel_index] - geometry.receivers[obs[j].channel_index]).norm();
            if d > best {
                best = d;
                widest = (i, j);
            }
        }
    }
    let candidates = provisional_points(&obs[widest.0], &obs[widest.1], geometry, acq);
    let scored = candidates
        .iter()
        .map(|p| (p, path_errors(p, obs, geometry, acq).fold(0.0, f64::max)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match scored {
        None => Validation {
            accepted: false,
            residual: f64::INFINITY,
            position: None,
            reason: Some(RejectReason::NoProvisionalPosition),
        },
        Some((p, residual)) => {
            let accepted = residual < threshold;
            Validation {
                accepted,
                residual,
                position: Some(*p),
                reason: (!accepted).then_some(RejectReason::ReprojectionError),
            }
        }
    }
}

/// Observations tried as triangulation anchors when pruning long tracks.
const PRUNE_ANCHORS: usize = 16;

/// Largest subset of observations consistent with one position, found by
/// trying pairs of observations as the provisional triangulation: every
/// pair for short tracks, otherwise pairs among evenly spaced anchors and
/// the reference. Keeps the reference observation or gives up.
pub fn prune_track(
    track: &EchoTrack,
    geometry: &TransducerGeometry,
    acq: &AcquisitionConfig,
    threshold: f64,
) -> Option<EchoTrack> {
    let obs = &track.observations;
    let n = obs.len();
    let mut anchors: Vec<usize> = if n <= PRUNE_ANCHORS {
        (0..n).collect()
    } else {
        (0..PRUNE_ANCHORS).map(|a| a * (n - 1) / (PRUNE_ANCHORS - 1)).collect()
    };
    if let Some(r) = obs.iter().position(|o| o.channel_index == track.reference_channel) {
        anchors.push(r);
    }
    anchors.sort_unstable();
    anchors.dedup();
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for (x, &i) in anchors.iter().enumerate() {
        for &j in &anchors[x + 1..] {
            for p in provisional_points(&obs[i], &obs[j], geometry, acq) {
                let errs: Vec<f64> = path_errors(&p, obs, geometry, acq).collect();
                let mask: Vec<bool> = errs.iter().map(|&e| e < threshold).collect();
                let count = mask.iter().filter(|&&m| m).count();
                let total: f64 = errs.iter().zip(&mask).filter(|(_, &m)| m).map(|(e, _)| e).sum();
                let better = match &best {
                    None => true,
                    Some((c, t, _)) => count > *c || (count == *c && total < *t),
                };
                if better {
                    best = Some((count, total, mask));
                }
            }
        }
    }
    let (count, _, mask) = best?;
    if count < 3 {
        return None;
    }
    let kept: Vec<ToAObservation> = obs.iter().zip(&mask).filter(|(_, &m)| m).map(|(o, _)| *o).collect();
    if !kept.iter().any(|o| o.channel_index == track.reference_channel) {
        return None;
    }
    let pruned = EchoTrack {
        reference_channel: track.reference_channel,
        observations: kept,
    };
    reproject_validate(&pruned, geometry, acq, threshold).accepted.then_some(pruned)
}
