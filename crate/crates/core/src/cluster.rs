//! Mean-shift fusion of intersection candidates into bubble positions.
//!
//! Work happens in coordinates relative to the first candidate in sorted
//! order, and output offsets are snapped to a 2^-40 m lattice. Together
//! these make the result independent of input order and shift it by exactly
//! `v` when all inputs shift by a lattice vector `v`.

use crate::error::{Error, Result};
use crate::geometry::LocalizationCandidate;
use crate::types::Vec2;

/// Lattice for output offsets, about 0.9 pm.
const SNAP: f64 = 1.0 / (1u64 << 40) as f64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MBLocation {
    pub position: Vec2,
    /// Number of member candidates.
    pub support: usize,
    /// RMS distance of members to `position`, in meters.
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    /// Kernel bandwidth `h` in meters.
    pub bandwidth: f64,
    pub min_cluster_size: usize,
    pub max_iterations: usize,
    /// Stop when a step is shorter than this fraction of `h`.
    pub step_tolerance: f64,
    /// Modes closer than this fraction of `h` are merged.
    pub merge_radius: f64,
    /// Above this many candidates, seeds sit on a grid of spacing `h`.
    pub seed_cap: usize,
    /// Weight candidates by `1 / condition^2`.
    pub condition_weighting: bool,
}

impl ClusterConfig {
    /// Defaults with `h = wavelength / 4`.
    pub fn for_wavelength(wavelength: f64) -> Self {
        Self {
            bandwidth: 0.25 * wavelength,
            min_cluster_size: 2,
            max_iterations: 100,
            step_tolerance: 1e-3,
            merge_radius: 0.5,
            seed_cap: 10_000,
            condition_weighting: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if self.min_cluster_size == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument("min_cluster_size and max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

fn kernel(d2: f64, h: f64) -> f64 {
    (-0.5 * d2 / (h * h)).exp()
}

/// Kernel-weighted mean. Exponents are shifted by the nearest squared
/// distance, which cancels in the ratio and keeps far starts from
/// underflowing to an all-zero weight sum.
fn weighted_step(p: &Vec2, points: &[Vec2], weights: &[f64], h: f64) -> Vec2 {
    let nearest = points
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, _)| (s - p).norm_squared())
        .fold(f64::INFINITY, f64::min);
    if !nearest.is_finite() {
        return *p;
    }
    let mut num = Vec2::zeros();
    let mut den = 0.0;
    for (s, &w) in points.iter().zip(weights) {
        let k = w * kernel((s - p).norm_squared() - nearest, h);
        num += k * s;
        den += k;
    }
    if den > 0.0 {
        num / den
    } else {
        *p
    }
}

/// One mean-shift update with a Gaussian kernel of bandwidth `h`.
pub fn mean_shift_step(p: &Vec2, candidates: &[Vec2], bandwidth: f64) -> Vec2 {
    let ones = vec![1.0; candidates.len()];
    weighted_step(p, candidates, &ones, bandwidth)
}

/// Kernel density (unnormalized) at `p`.
pub fn kernel_density(p: &Vec2, candidates: &[Vec2], bandwidth: f64) -> f64 {
    candidates.iter().map(|s| kernel((s - p).norm_squared(), bandwidth)).sum()
}

/// Iterates from `start` until the step falls below `tol` or `max_iter`
/// updates; returns every iterate including the start.
pub fn mean_shift_trajectory(start: Vec2, candidates: &[Vec2], bandwidth: f64, tol: f64, max_iter: usize) -> Vec<Vec2> {
    let ones = vec![1.0; candidates.len()];
    trajectory(start, candidates, &ones, bandwidth, tol, max_iter)
}

fn trajectory(start: Vec2, points: &[Vec2], weights: &[f64], h: f64, tol: f64, max_iter: usize) -> Vec<Vec2> {
    let mut path = vec![start];
    let mut p = start;
    for _ in 0..max_iter {
        let next = weighted_step(&p, points, weights, h);
        path.push(next);
        let step = (next - p).norm();
        p = next;
        if step < tol {
            break;
        }
    }
    path
}

fn converge(start: Vec2, points: &[Vec2], weights: &[f64], cfg: &ClusterConfig) -> Vec2 {
    *trajectory(start, points, weights, cfg.bandwidth, cfg.step_tolerance * cfg.bandwidth, cfg.max_iterations)
        .last()
        .expect("trajectory holds its start")
}

fn snap(v: f64) -> f64 {
    (v / SNAP).round() * SNAP
}

fn candidate_weight(c: &LocalizationCandidate, cfg: &ClusterConfig) -> f64 {
    if !cfg.condition_weighting {
        return 1.0;
    }
    if c.condition.is_finite() {
        1.0 / c.condition.max(1.0).powi(2)
    } else {
        0.0
    }
}

/// Grid seeds at spacing `h`, one per occupied cell, at cell centers.
fn grid_seeds(points: &[Vec2], h: f64) -> Vec<Vec2> {
    let mut cells: Vec<(i64, i64)> = points
        .iter()
        .map(|p| ((p.x / h).floor() as i64, (p.y / h).floor() as i64))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    cells
        .into_iter()
        .map(|(i, j)| Vec2::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h))
        .collect()
}

/// Fuses candidates into bubble positions.
///
/// Every candidate seeds one mean-shift run (grid seeds beyond
/// `seed_cap`). Modes within `merge_radius * h` are merged toward the
/// denser one. A candidate belongs to the cluster its own run reached (the
/// nearest mode in grid mode) if it also lies within `h` of that mode. The
/// reported position is the kernel-weighted mean of the members.
pub fn cluster_candidates(candidates: &[LocalizationCandidate], config: &ClusterConfig) -> Result<Vec<MBLocation>> {
    config.validate()?;
    let mut items: Vec<(Vec2, f64)> = candidates
        .iter()
        .filter(|c| c.position.iter().all(|v| v.is_finite()))
        .map(|c| (c.position, candidate_weight(c, config)))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    if items.is_empty() {
        return Ok(Vec::new());
    }
    items.sort_by(|a, b| {
        a.0.x
            .total_cmp(&b.0.x)
            .then(a.0.y.total_cmp(&b.0.y))
            .then(a.1.total_cmp(&b.1))
    });
    let anchor = items[0].0;
    let points: Vec<Vec2> = items.iter().map(|(p, _)| p - anchor).collect();
    let weights: Vec<f64> = items.iter().map(|(_, w)| *w).collect();
    let h = config.bandwidth;

    let per_candidate = points.len() <= config.seed_cap;
    let seeds = if per_candidate { points.clone() } else { grid_seeds(&points, h) };
    let modes: Vec<Vec2> = seeds.iter().map(|s| converge(*s, &points, &weights, config)).collect();
    let density: Vec<f64> = modes
        .iter()
        .map(|m| {
            points
                .iter()
                .zip(&weights)
                .map(|(s, w)| w * kernel((s - m).norm_squared(), h))
                .sum()
        })
        .collect();

    // Denser modes become representatives first; ties by seed index.
    let mut by_density: Vec<usize> = (0..modes.len()).collect();
    by_density.sort_by(|&a, &b| density[b].total_cmp(&density[a]).then(a.cmp(&b)));
    let merge = config.merge_radius * h;
    let mut reps: Vec<Vec2> = Vec::new();
    let mut seed_cluster = vec![0usize; modes.len()];
    for &i in &by_density {
        match reps.iter().position(|r| (r - modes[i]).norm() < merge) {
            Some(c) => seed_cluster[i] = c,
            None => {
                seed_cluster[i] = reps.len();
                reps.push(modes[i]);
            }
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); reps.len()];
    for (i, p) in points.iter().enumerate() {
        let cluster = if per_candidate {
            Some(seed_cluster[i])
        } else {
            (0..reps.len())
                .min_by(|&a, &b| (reps[a] - p).norm().total_cmp(&(reps[b] - p).norm()).then(a.cmp(&b)))
        };
        if let Some(c) = cluster {
            if (reps[c] - p).norm() <= h {
                members[c].push(i);
            }
        }
    }

    let mut out = Vec::new();
    for (rep, idx) in reps.iter().zip(&members) {
        if idx.len() < config.min_cluster_size {
            continue;
        }
        let mut num = Vec2::zeros();
        let mut den = 0.0;
        for &i in idx {
            let k = weights[i] * kernel((points[i] - rep).norm_squared(), h);
            num += k * points[i];
            den += k;
        }
        let center = if den > 0.0 {
            num / den
        } else {
            idx.iter().map(|&i| points[i]).sum::<Vec2>() / idx.len() as f64
        };
        let center = Vec2::new(snap(center.x), snap(center.y));
        let spread = (idx.iter().map(|&i| (points[i] - center).norm_squared()).sum::<f64>() / idx.len() as f64).sqrt();
        out.push(MBLocation {
            position: anchor + center,
            support: idx.len(),
            spread,
        });
    }
    out.sort_by(|a, b| a.position.x.total_cmp(&b.position.x).then(a.position.y.total_cmp(&b.position.y)));
    Ok(out)
}
