//! Detection scoring against ground truth and density rendering.

use crate::error::{Error, Result};
use crate::types::Vec2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub frame_id: u64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Root mean squared distance of the true positives, in meters; `None`
    /// without true positives.
    pub rmse: Option<f64>,
}

/// Greedy one-to-one matching in ascending distance; pairs closer than
/// `gate` count as true positives. Returns matched `(estimate, truth)`
/// index pairs.
pub fn greedy_matches(estimates: &[Vec2], truth: &[Vec2], gate: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in estimates.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = (e - t).norm();
            if d < gate {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; estimates.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    for (d, i, j) in pairs {
        if !used_e[i] && !used_t[j] {
            used_e[i] = true;
            used_t[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

/// Scores one frame with an arbitrary gate radius.
pub fn score_with_gate(frame_id: u64, estimates: &[Vec2], truth: &[Vec2], gate: f64) -> Result<FrameScore> {
    if !(gate > 0.0) {
        return Err(Error::InvalidArgument(format!("gate must be positive, got {gate}")));
    }
    let matches = greedy_matches(estimates, truth, gate);
    let tp = matches.len();
    let rmse = (tp > 0).then(|| (matches.iter().map(|m| m.2 * m.2).sum::<f64>() / tp as f64).sqrt());
    Ok(FrameScore {
        frame_id,
        true_positives: tp,
        false_positives: estimates.len() - tp,
        false_negatives: truth.len() - tp,
        rmse,
    })
}

/// Scores one frame with the `wavelength / 4` gate.
pub fn match_and_score(frame_id: u64, estimates: &[Vec2], truth: &[Vec2], wavelength: f64) -> Result<FrameScore> {
    if !(wavelength > 0.0) {
        return Err(Error::InvalidArgument(format!("wavelength must be positive, got {wavelength}")));
    }
    score_with_gate(frame_id, estimates, truth, 0.25 * wavelength)
}

/// `100 * TP / (TP + FP + FN)` summed over frames.
pub fn jaccard(scores: &[FrameScore]) -> Result<f64> {
    let (tp, fp, fn_) = scores.iter().fold((0usize, 0usize, 0usize), |acc, s| {
        (acc.0 + s.true_positives, acc.1 + s.false_positives, acc.2 + s.false_negatives)
    });
    let den = tp + fp + fn_;
    if den == 0 {
        return Err(Error::UndefinedMetric("jaccard of frames without detections or truth"));
    }
    Ok(100.0 * tp as f64 / den as f64)
}

/// Mean and population standard deviation of per-frame RMSE in units of
/// `wavelength / 10`, over frames with true positives.
pub fn aggregate_rmse(scores: &[FrameScore], wavelength: f64) -> Result<(f64, f64)> {
    let unit = wavelength / 10.0;
    let values: Vec<f64> = scores.iter().filter_map(|s| s.rmse).map(|r| r / unit).collect();
    if values.is_empty() {
        return Err(Error::UndefinedMetric("rmse without true positives"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Corner of pixel `(0, 0)`; `x` grows with columns, `z` with rows.
    pub origin: Vec2,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
    /// Display exponent, applied only when exporting.
    pub gamma: f64,
}

impl GridConfig {
    /// Grid covering `[x_min, x_max] x [z_min, z_max]`.
    pub fn covering(x_min: f64, x_max: f64, z_min: f64, z_max: f64, pixel_size: f64, gamma: f64) -> Result<Self> {
        let cfg = Self {
            origin: Vec2::new(x_min, z_min),
            pixel_size,
            width: ((x_max - x_min) / pixel_size).ceil().max(0.0) as usize,
            height: ((z_max - z_min) / pixel_size).ceil().max(0.0) as usize,
            gamma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("grid needs positive pixel size and extent".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityImage {
    pub grid: GridConfig,
    /// Row-major counts, `height` rows of `width`.
    pub data: Vec<f64>,
}

impl DensityImage {
    pub fn zeros(grid: GridConfig) -> Self {
        Self {
            data: vec![0.0; grid.width * grid.height],
            grid,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.grid.width + col]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Pixel holding `p`, if inside the grid.
    pub fn pixel_of(&self, p: &Vec2) -> Option<(usize, usize)> {
        let c = ((p.x - self.grid.origin.x) / self.grid.pixel_size).floor();
        let r = ((p.y - self.grid.origin.y) / self.grid.pixel_size).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.grid.width && (r as usize) < self.grid.height)
            .then_some((r as usize, c as usize))
    }

    /// Gamma-corrected intensities scaled to `0..=1`.
    pub fn display(&self) -> Vec<f64> {
        let max = self.data.iter().fold(0.0f64, |m, &v| m.max(v));
        if max == 0.0 {
            return vec![0.0; self.data.len()];
        }
        self.data.iter().map(|v| (v / max).powf(self.grid.gamma)).collect()
    }
}

/// Counts locations per pixel; points outside the grid are skipped.
pub fn render_density(locations: &[Vec2], grid: &GridConfig) -> Result<DensityImage> {
    grid.validate()?;
    let mut img = DensityImage::zeros(*grid);
    for p in locations {
        if let Some((r, c)) = img.pixel_of(p) {
            img.data[r * grid.width + c] += 1.0;
        }
    }
    Ok(img)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-0.5 * ((i as f64 - r) / SSIM_SIGMA).powi(2)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only fully covered positions.
fn filter_valid(data: &[f64], width: usize, height: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (w2, h2) = (width + 1 - n, height + 1 - n);
    let mut rows = vec![0.0; height * w2];
    for r in 0..height {
        for c in 0..w2 {
            rows[r * w2 + c] = (0..n).map(|i| k[i] * data[r * width + c + i]).sum();
        }
    }
    let mut out = vec![0.0; h2 * w2];
    for r in 0..h2 {
        for c in 0..w2 {
            out[r * w2 + c] = (0..n).map(|i| k[i] * rows[(r + i) * w2 + c]).sum();
        }
    }
    (out, w2, h2)
}

/// Mean SSIM in percent with an 11 x 11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03` and `L` the joint dynamic range of both images.
pub fn ssim(a: &DensityImage, b: &DensityImage) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::InvalidArgument("SSIM needs identical grids".into()));
    }
    let (w, h) = (a.grid.width, a.grid.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {SSIM_WINDOW} x {SSIM_WINDOW} pixels")));
    }
    let (lo, hi) = a
        .data
        .iter()
        .chain(&b.data)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let k = ssim_kernel();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mu_a, w2, h2) = filter_valid(&a.data, w, h, &k);
    let (mu_b, _, _) = filter_valid(&b.data, w, h, &k);
    let (aa, _, _) = filter_valid(&prod(&a.data, &a.data), w, h, &k);
    let (bb, _, _) = filter_valid(&prod(&b.data, &b.data), w, h, &k);
    let (ab, _, _) = filter_valid(&prod(&a.data, &b.data), w, h, &k);
    let mut total = 0.0;
    for i in 0..w2 * h2 {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(100.0 * total / (w2 * h2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 197.12e-6;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec2> {
        v.iter().map(|&(x, z)| Vec2::new(x, z)).collect()
    }

    #[test]
    fn perfect_estimates() {
        let t = pts(&[(0.0, 0.01), (1e-3, 0.011), (-2e-3, 0.009)]);
        let s = match_and_score(0, &t, &t, LAMBDA).unwrap();
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (3, 0, 0));
        assert_eq!(s.rmse, Some(0.0));
    }

    #[test]
    fn no_estimates() {
        let t = pts(&[(0.0, 0.01); 5]);
        let s = match_and_score(0, &[], &t, LAMBDA).unwrap();
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (0, 0, 5));
        assert_eq!(s.rmse, None);
    }

    #[test]
    fn beyond_gate_is_fp_and_fn() {
        let s = match_and_score(0, &pts(&[(0.3 * LAMBDA, 0.0)]), &pts(&[(0.0, 0.0)]), LAMBDA).unwrap();
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (0, 1, 1));
    }

    #[test]
    fn greedy_prefers_closest_pair() {
        // Estimate 0 is closer to truth 0 than estimate 1 is.
        let e = pts(&[(0.0, 0.0), (0.2 * LAMBDA, 0.0)]);
        let t = pts(&[(0.01 * LAMBDA, 0.0)]);
        let m = greedy_matches(&e, &t, 0.25 * LAMBDA);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].0, m[0].1), (0, 0));
    }

    #[test]
    fn jaccard_examples() {
        let perfect = FrameScore { frame_id: 0, true_positives: 4, false_positives: 0, false_negatives: 0, rmse: Some(0.0) };
        assert_eq!(jaccard(&[perfect, perfect]).unwrap(), 100.0);
        let s = FrameScore { frame_id: 0, true_positives: 1, false_positives: 1, false_negatives: 2, rmse: Some(0.0) };
        assert_eq!(jaccard(&[s]).unwrap(), 25.0);
        let empty = FrameScore { frame_id: 0, true_positives: 0, false_positives: 0, false_negatives: 0, rmse: None };
        assert!(matches!(jaccard(&[empty]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rmse_aggregation_examples() {
        let f = |r: f64| FrameScore { frame_id: 0, true_positives: 1, false_positives: 0, false_negatives: 0, rmse: Some(r) };
        let (m, s) = aggregate_rmse(&[f(LAMBDA / 10.0)], LAMBDA).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s == 0.0);
        let (m, s) = aggregate_rmse(&[f(LAMBDA / 10.0), f(3.0 * LAMBDA / 10.0)], LAMBDA).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        let none = FrameScore { rmse: None, true_positives: 0, ..f(0.0) };
        assert!(aggregate_rmse(&[none], LAMBDA).is_err());
    }

    #[test]
    fn swapping_roles_swaps_fp_and_fn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let e: Vec<Vec2> = (0..8).map(|_| Vec2::new(rng.gen_range(0.0..5e-4), rng.gen_range(0.0..5e-4))).collect();
            let t: Vec<Vec2> = (0..6).map(|_| Vec2::new(rng.gen_range(0.0..5e-4), rng.gen_range(0.0..5e-4))).collect();
            let a = match_and_score(0, &e, &t, LAMBDA).unwrap();
            let b = match_and_score(0, &t, &e, LAMBDA).unwrap();
            assert_eq!(a.true_positives, b.true_positives);
            assert_eq!((a.false_positives, a.false_negatives), (b.false_negatives, b.false_positives));
            assert_eq!(a.rmse, b.rmse);
            let wider = score_with_gate(0, &e, &t, 0.5 * LAMBDA).unwrap();
            assert!(wider.true_positives >= a.true_positives);
            assert!(a.rmse.is_none_or(|r| r < 0.25 * LAMBDA));
        }
    }

    fn grid() -> GridConfig {
        GridConfig::covering(-1e-3, 1e-3, 0.009, 0.011, LAMBDA / 10.0, 0.9).unwrap()
    }

    #[test]
    fn render_examples() {
        let g = grid();
        let empty = render_density(&[], &g).unwrap();
        assert_eq!(empty.total(), 0.0);

        let p = Vec2::new(1.234e-4, 0.0100321);
        let img = render_density(&[p], &g).unwrap();
        let r = ((p.y - g.origin.y) / g.pixel_size).floor() as usize;
        let c = ((p.x - g.origin.x) / g.pixel_size).floor() as usize;
        assert_eq!(img.at(r, c), 1.0);
        assert_eq!(img.data.iter().filter(|&&v| v != 0.0).count(), 1);

        let bad = GridConfig { pixel_size: 0.0, ..g };
        assert!(render_density(&[], &bad).is_err());
    }

    /// Oracle: with uniform points each pixel count is Poisson with mean
    /// N / pixels, so the dispersion statistic sum (c - m)^2 / m follows
    /// chi-square with pixels - 1 degrees of freedom.
    #[test]
    fn uniform_render_is_poisson() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let g = GridConfig { origin: Vec2::new(0.0, 0.0), pixel_size: 1e-5, width: 20, height: 20, gamma: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let locs: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.gen_range(0.0..2e-4), rng.gen_range(0.0..2e-4))).collect();
        let img = render_density(&locs, &g).unwrap();
        assert_eq!(img.total(), n as f64);
        let m = n as f64 / 400.0;
        let stat: f64 = img.data.iter().map(|c| (c - m).powi(2) / m).sum();
        let chi = ChiSquared::new(399.0).unwrap();
        assert!(stat < chi.inverse_cdf(0.995) && stat > chi.inverse_cdf(0.005), "{stat}");
    }

    #[test]
    fn gamma_is_display_only() {
        let g = grid();
        let img = render_density(&[Vec2::new(0.0, 0.01), Vec2::new(0.0, 0.01), Vec2::new(5e-4, 0.0101)], &g).unwrap();
        let d = img.display();
        assert!(d.iter().any(|&v| (v - 0.5f64.powf(0.9)).abs() < 1e-12));
        assert_eq!(img.total(), 3.0);
    }

    #[test]
    fn ssim_examples() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let locs: Vec<Vec2> = (0..500).map(|_| Vec2::new(rng.gen_range(-1e-3..1e-3), rng.gen_range(0.009..0.011))).collect();
        let a = render_density(&locs, &g).unwrap();
        assert!((ssim(&a, &a).unwrap() - 100.0).abs() < 1e-9);
        let z = DensityImage::zeros(g);
        let s = ssim(&a, &z).unwrap();
        assert!((0.0..100.0).contains(&s), "{s}");
        let other = DensityImage::zeros(GridConfig { width: g.width + 1, ..g });
        assert!(ssim(&a, &other).is_err());
    }

    /// No estimate has two truths inside the gate and vice versa.
    fn unambiguous(e: &[Vec2], t: &[Vec2], gate: f64) -> bool {
        let within = |a: &Vec2, b: &[Vec2]| b.iter().filter(|q| (a - *q).norm() < gate).count();
        e.iter().all(|p| within(p, t) <= 1) && t.iter().all(|p| within(p, e) <= 1)
    }

    /// Oracle: optimal assignment maximizing gated matches, then minimizing
    /// total distance.
    #[test]
    fn greedy_agrees_with_optimal_assignment() {
        use pathfinding::prelude::{kuhn_munkres, Matrix};
        use rand_distr::Distribution;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gate = 0.25 * LAMBDA;
        let jitter = rand_distr::Normal::new(0.0, LAMBDA / 20.0).unwrap();
        let (mut agree, mut clear) = (0, 0);
        let trials = 200;
        for _ in 0..trials {
            let t: Vec<Vec2> = (0..20).map(|_| Vec2::new(rng.gen_range(0.0..1e-3), rng.gen_range(0.0..1e-3))).collect();
            let mut e = Vec::new();
            for p in &t {
                if rng.gen_bool(0.9) {
                    e.push(p + Vec2::new(jitter.sample(&mut rng), jitter.sample(&mut rng)));
                }
            }
            let n = t.len().max(e.len());
            let w = Matrix::from_fn(n, n, |(i, j)| {
                if i < e.len() && j < t.len() {
                    let d = (e[i] - t[j]).norm();
                    if d < gate {
                        return 1_000_000_000 - (d / gate * 1e6).round() as i64;
                    }
                }
                0
            });
            let (_, assign) = kuhn_munkres(&w);
            let optimal_tp = (0..n).filter(|&i| w[(i, assign[i])] > 0).count();
            let greedy = match_and_score(0, &e, &t, LAMBDA).unwrap();
            if greedy.true_positives == optimal_tp {
                agree += 1;
            }
            if unambiguous(&e, &t, gate) {
                clear += 1;
                assert_eq!(greedy.true_positives, optimal_tp);
            }
        }
        assert!(agree as f64 >= 0.95 * trials as f64, "{agree}/{trials}");
        assert!(clear > 0 && clear < trials, "test should mix both kinds of scene: {clear}");
    }
}
