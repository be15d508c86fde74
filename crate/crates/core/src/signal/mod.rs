//! Parametric echo model and per-channel fitting.

mod envelope;
mod memgo;

pub use envelope::{analytic_signal, envelope, initial_toa_estimates};
use envelope::detection_floor;
pub use memgo::{memgo_eval, memgo_loss, memgo_sum, sample_grid, EchoComponent, NUM_PARAMS};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lm::{levenberg_marquardt, LeastSquaresProblem, LmSettings};
use crate::types::AcquisitionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    Analytic,
    /// Central differences; slower, kept for cross-checking.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Initial spread in samples.
    pub sigma_init: f64,
    /// Initial carrier frequency in radians per sample.
    pub omega_init: f64,
    /// Onset threshold as a multiple of the median absolute envelope
    /// gradient.
    pub gradient_threshold_factor: f64,
    /// Lower bound on the onset threshold relative to the envelope peak.
    pub relative_gradient_floor: f64,
    /// Detected peaks must exceed this multiple of the median envelope.
    pub min_peak_to_median: f64,
    /// Detected peaks must exceed this fraction of the strongest peak.
    pub min_relative_peak: f64,
    pub max_components: usize,
    /// Components whose windows (`mu +- window_sigmas * sigma`) overlap are
    /// fitted jointly; disjoint groups are fitted independently.
    pub window_sigmas: f64,
    /// Rounds of adding a component at the strongest residual peak after
    /// the initial fit; resolves echoes merged in the envelope.
    pub residual_rounds: usize,
    /// A residual peak must reach this fraction of the signal envelope at
    /// the same sample to seed a new component.
    pub residual_peak_fraction: f64,
    pub lm: LmSettings,
    pub jacobian: JacobianMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            sigma_init: 6.0,
            omega_init: std::f64::consts::FRAC_PI_4,
            gradient_threshold_factor: 4.0,
            relative_gradient_floor: 1e-3,
            min_peak_to_median: 4.0,
            min_relative_peak: 0.02,
            max_components: 32,
            window_sigmas: 6.0,
            residual_rounds: 3,
            residual_peak_fraction: 0.25,
            lm: LmSettings::default(),
            jacobian: JacobianMode::Analytic,
        }
    }
}

impl FitConfig {
    /// Defaults scaled to an acquisition: `sigma_init` is `sigma_fraction`
    /// of a pulse of `pulse_cycles` carrier cycles.
    pub fn for_acquisition(acq: &AcquisitionConfig, pulse_cycles: f64, sigma_fraction: f64) -> Self {
        let samples_per_cycle = acq.sample_rate / acq.center_frequency;
        Self {
            sigma_init: sigma_fraction * pulse_cycles * samples_per_cycle,
            omega_init: acq.omega_per_sample(),
            ..Self::default()
        }
    }
}

/// Fitted echoes of one channel, ordered by `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEchoSet {
    pub channel_index: usize,
    pub components: Vec<EchoComponent>,
    pub fit_residual: f64,
}

/// Fit of a group of components to one stretch of the trace. Each
/// component is evaluated only within `window_sigmas * sigma + 2` samples
/// of its center, where the rest of it is below exp(-window_sigmas^2 / 2).
struct WindowProblem<'a> {
    start: usize,
    target: &'a [f64],
    jacobian: JacobianMode,
    window_sigmas: f64,
}

impl WindowProblem<'_> {
    /// Rows (relative to `start`) where `c` is evaluated.
    fn support(&self, c: &EchoComponent) -> std::ops::Range<usize> {
        let half = self.window_sigmas * c.sigma + 2.0;
        let lo = (c.mu - half - self.start as f64).floor().max(0.0);
        let hi = (c.mu + half - self.start as f64).ceil().max(-1.0) + 1.0;
        let len = self.target.len() as f64;
        (lo.min(len) as usize)..(hi.min(len) as usize)
    }

    fn components(p: &DVector<f64>) -> impl Iterator<Item = EchoComponent> + '_ {
        p.as_slice().chunks_exact(NUM_PARAMS).map(EchoComponent::from_slice)
    }

    fn model(&self, p: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.target.len()];
        for c in Self::components(p) {
            for i in self.support(&c) {
                out[i] += c.value((self.start + i) as f64);
            }
        }
        out
    }
}

impl LeastSquaresProblem for WindowProblem<'_> {
    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        let model = self.model(p);
        DVector::from_iterator(model.len(), self.target.iter().zip(&model).map(|(y, m)| y - m))
    }

    fn model_jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let rows = self.target.len();
        let mut jac = DMatrix::zeros(rows, p.len());
        match self.jacobian {
            JacobianMode::Analytic => {
                for (k, c) in Self::components(p).enumerate() {
                    for i in self.support(&c) {
                        let (_, g) = c.value_and_gradient((self.start + i) as f64);
                        for (j, gj) in g.iter().enumerate() {
                            jac[(i, k * NUM_PARAMS + j)] = *gj;
                        }
                    }
                }
            }
            JacobianMode::FiniteDifference => {
                for j in 0..p.len() {
                    let h = 1e-6 * p[j].abs().max(1.0);
                    let mut hi = p.clone();
                    let mut lo = p.clone();
                    hi[j] += h;
                    lo[j] -= h;
                    let (mh, ml) = (self.model(&hi), self.model(&lo));
                    for i in 0..rows {
                        jac[(i, j)] = (mh[i] - ml[i]) / (2.0 * h);
                    }
                }
            }
        }
        jac
    }

    /// Analytic normal equations, summing only over the rows where both
    /// components of a block are evaluated.
    fn normal_equations(&self, p: &DVector<f64>, r: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        if self.jacobian == JacobianMode::FiniteDifference {
            let jac = self.model_jacobian(p);
            return (jac.tr_mul(&jac), jac.tr_mul(r));
        }
        let comps: Vec<EchoComponent> = Self::components(p).collect();
        let ranges: Vec<std::ops::Range<usize>> = comps.iter().map(|c| self.support(c)).collect();
        let grads: Vec<Vec<[f64; NUM_PARAMS]>> = comps
            .iter()
            .zip(&ranges)
            .map(|(c, range)| range.clone().map(|i| c.value_and_gradient((self.start + i) as f64).1).collect())
            .collect();
        let n = p.len();
        let mut jtj = DMatrix::zeros(n, n);
        let mut jtr = DVector::zeros(n);
        for a in 0..comps.len() {
            for (off, g) in grads[a].iter().enumerate() {
                let ri = r[ranges[a].start + off];
                for (j, gj) in g.iter().enumerate() {
                    jtr[a * NUM_PARAMS + j] += gj * ri;
                }
            }
            for b in a..comps.len() {
                let lo = ranges[a].start.max(ranges[b].start);
                let hi = ranges[a].end.min(ranges[b].end);
                for i in lo..hi {
                    let ga = &grads[a][i - ranges[a].start];
                    let gb = &grads[b][i - ranges[b].start];
                    for (j, x) in ga.iter().enumerate() {
                        for (l, y) in gb.iter().enumerate() {
                            jtj[(a * NUM_PARAMS + j, b * NUM_PARAMS + l)] += x * y;
                        }
                    }
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        (jtj, jtr)
    }

    fn jacobian_transpose_mul(&self, p: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        if self.jacobian == JacobianMode::FiniteDifference {
            return self.model_jacobian(p).tr_mul(v);
        }
        let mut out = DVector::zeros(p.len());
        for (a, c) in Self::components(p).enumerate() {
            for i in self.support(&c) {
                let g = c.value_and_gradient((self.start + i) as f64).1;
                for (j, gj) in g.iter().enumerate() {
                    out[a * NUM_PARAMS + j] += gj * v[i];
                }
            }
        }
        out
    }

    /// Positive spread and frequency, frequency below Nyquist, and the
    /// echo kept inside its window.
    fn is_feasible(&self, p: &DVector<f64>) -> bool {
        let (lo, hi) = (self.start as f64, (self.start + self.target.len()) as f64);
        let len = hi - lo;
        p.as_slice().chunks_exact(NUM_PARAMS).all(|c| {
            c[2] > 0.0 && c[2] <= len && c[4] > 0.0 && c[4] < std::f64::consts::PI && c[1] >= lo && c[1] <= hi
        })
    }
}

/// Least-squares amplitudes and phases with every other parameter held
/// fixed. The model is linear in `(alpha cos phi, alpha sin phi)`, so this is
/// exact and gives LM a start on the right carrier cycle.
fn presolve_amplitudes(problem: &WindowProblem, components: &mut [EchoComponent]) {
    let rows = problem.target.len();
    let mut basis = DMatrix::zeros(rows, 2 * components.len());
    for (k, c) in components.iter().enumerate() {
        let in_phase = EchoComponent { alpha: 1.0, phi: 0.0, ..*c };
        let quadrature = EchoComponent { alpha: 1.0, phi: std::f64::consts::FRAC_PI_2, ..*c };
        for i in 0..rows {
            let t = (problem.start + i) as f64;
            basis[(i, 2 * k)] = in_phase.value(t);
            basis[(i, 2 * k + 1)] = quadrature.value(t);
        }
    }
    let target = DVector::from_column_slice(problem.target);
    let Ok(coef) = basis.svd(true, true).solve(&target, 1e-10) else {
        return;
    };
    for (k, c) in components.iter_mut().enumerate() {
        let (a, b) = (coef[2 * k], coef[2 * k + 1]);
        let alpha = a.hypot(b);
        if alpha > 0.0 && alpha.is_finite() {
            c.alpha = alpha;
            c.phi = b.atan2(a);
        }
    }
}

/// Groups of component indices (into a `mu`-sorted list) whose fit windows
/// overlap, with the sample range each group covers.
fn window_groups(sorted: &[EchoComponent], len: usize, window_sigmas: f64) -> Vec<(usize, usize, std::ops::Range<usize>)> {
    let mut groups: Vec<(usize, usize, f64, f64)> = Vec::new();
    for (k, c) in sorted.iter().enumerate() {
        let half = window_sigmas * c.sigma + 2.0;
        let (lo, hi) = (c.mu - half, c.mu + half);
        match groups.last_mut() {
            Some(g) if lo <= g.3 => {
                g.1 = k + 1;
                g.3 = g.3.max(hi);
            }
            _ => groups.push((k, k + 1, lo, hi)),
        }
    }
    groups
        .into_iter()
        .filter_map(|(a, b, lo, hi)| {
            let start = lo.floor().max(0.0) as usize;
            let end = (hi.ceil().max(0.0) as usize + 1).min(len);
            (start < end).then_some((a, b, start..end))
        })
        .collect()
}

fn pack(components: &[EchoComponent]) -> DVector<f64> {
    DVector::from_iterator(components.len() * NUM_PARAMS, components.iter().flat_map(|c| c.to_array()))
}

/// Canonical form: positive amplitude, wrapped phase.
fn canonicalize(mut c: EchoComponent) -> EchoComponent {
    if c.alpha < 0.0 {
        c.alpha = -c.alpha;
        c.phi += std::f64::consts::PI;
    }
    c.phi = c.wrapped_phase();
    c
}

fn sort_components(components: &mut [EchoComponent]) {
    components.sort_by(|a, b| a.mu.total_cmp(&b.mu).then(b.alpha.abs().total_cmp(&a.alpha.abs())));
}

/// Refines `initial` by damped least squares on `waveform` (sampled at
/// `0..T`). Never returns a set with a higher loss than `initial`.
pub fn fit_memgo(
    channel_index: usize,
    waveform: &[f64],
    initial: &[EchoComponent],
    config: &FitConfig,
) -> Result<ChannelEchoSet> {
    if initial.is_empty() {
        return Err(Error::InvalidArgument("fit needs at least one initial component".into()));
    }
    for c in initial {
        c.validate()?;
    }
    let mut sorted = initial.to_vec();
    sort_components(&mut sorted);
    let initial_loss = memgo_loss(&sorted, waveform)?;

    let mut fitted = sorted.clone();
    for (a, b, range) in window_groups(&sorted, waveform.len(), config.window_sigmas) {
        let problem = WindowProblem {
            start: range.start,
            target: &waveform[range],
            jacobian: config.jacobian,
            window_sigmas: config.window_sigmas,
        };
        let mut start_point = sorted[a..b].to_vec();
        let before = problem.residuals(&pack(&sorted[a..b])).norm_squared();
        presolve_amplitudes(&problem, &mut start_point);
        if !(problem.residuals(&pack(&start_point)).norm_squared() <= before) {
            start_point.copy_from_slice(&sorted[a..b]);
        }
        let p0 = pack(&start_point);
        match levenberg_marquardt(&problem, p0, &config.lm) {
            Ok(out) => {
                for (k, chunk) in out.params.as_slice().chunks_exact(NUM_PARAMS).enumerate() {
                    fitted[a + k] = EchoComponent::from_slice(chunk);
                }
            }
            Err(div) => {
                for (k, chunk) in div.last_valid.as_slice().chunks_exact(NUM_PARAMS).enumerate() {
                    fitted[a + k] = EchoComponent::from_slice(chunk);
                }
                return Err(Error::FitDiverged {
                    iterations: div.iterations,
                    last_valid: fitted,
                });
            }
        }
    }

    let mut components: Vec<EchoComponent> = fitted.into_iter().map(canonicalize).collect();
    sort_components(&mut components);
    let mut loss = memgo_loss(&components, waveform)?;
    if !(loss <= initial_loss) {
        components = sorted;
        loss = initial_loss;
    }
    Ok(ChannelEchoSet {
        channel_index,
        components,
        fit_residual: loss,
    })
}

/// Detects and fits all echoes on one channel.
///
/// After the fit to the envelope-detected echoes, components are added one
/// at a time at the strongest peak of the residual envelope, as long as the
/// peak stands out from both the signal envelope there and the detection
/// floor, and the refit removes at least half the energy such a component
/// would carry.
pub fn fit_channel(channel_index: usize, waveform: &[f64], config: &FitConfig) -> Result<ChannelEchoSet> {
    let initial = initial_toa_estimates(waveform, config)?;
    if initial.is_empty() {
        return Ok(ChannelEchoSet {
            channel_index,
            components: Vec::new(),
            fit_residual: waveform.iter().map(|v| v * v).sum(),
        });
    }
    let mut set = fit_memgo(channel_index, waveform, &initial, config)?;
    if config.residual_rounds == 0 {
        return Ok(set);
    }
    let signal_env = envelope(waveform);
    let floor = detection_floor(&signal_env, config);
    for _ in 0..config.residual_rounds {
        if set.components.len() >= config.max_components {
            break;
        }
        let model = memgo_sum(&set.components, &sample_grid(waveform.len()))?;
        let residual: Vec<f64> = waveform.iter().zip(&model).map(|(y, m)| y - m).collect();
        let res_env = envelope(&residual);
        let Some((idx, &height)) = res_env.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
            break;
        };
        if height < floor || height < config.residual_peak_fraction * signal_env[idx] {
            break;
        }
        let mut seeds = set.components.clone();
        seeds.push(EchoComponent {
            alpha: height,
            mu: idx as f64,
            sigma: config.sigma_init,
            eta: 0.0,
            omega: config.omega_init,
            phi: 0.0,
        });
        let candidate = fit_memgo(channel_index, waveform, &seeds, config)?;
        let energy = 0.5 * height * height * config.sigma_init * std::f64::consts::PI.sqrt();
        if set.fit_residual - candidate.fit_residual < 0.5 * energy {
            break;
        }
        set = candidate;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> EchoComponent {
        EchoComponent {
            alpha: 1.3,
            mu: 200.0,
            sigma: 6.0,
            eta: 0.8,
            omega: std::f64::consts::FRAC_PI_4,
            phi: 0.4,
        }
    }

    fn trace(components: &[EchoComponent], len: usize) -> Vec<f64> {
        memgo_sum(components, &sample_grid(len)).unwrap()
    }

    /// Loss of a single component as a function of `mu`, other parameters
    /// frozen at `base`; minimized by dense grid search.
    fn grid_search_mu(y: &[f64], base: EchoComponent, lo: f64, hi: f64, steps: usize) -> f64 {
        (0..=steps)
            .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
            .min_by(|a, b| {
                let la = memgo_loss(&[EchoComponent { mu: *a, ..base }], y).unwrap();
                let lb = memgo_loss(&[EchoComponent { mu: *b, ..base }], y).unwrap();
                la.total_cmp(&lb)
            })
            .unwrap()
    }

    #[test]
    fn exact_initialization_stays_put() {
        let y = trace(&[truth()], 400);
        let set = fit_memgo(0, &y, &[truth()], &FitConfig::default()).unwrap();
        let norm2: f64 = y.iter().map(|v| v * v).sum();
        assert!(set.fit_residual < 1e-10 * norm2);
        let got = set.components[0].to_array();
        for (g, t) in got.iter().zip(truth().to_array()) {
            assert!((g - t).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn recovers_mu_from_offset_start() {
        let y = trace(&[truth()], 400);
        let oracle = grid_search_mu(&y, truth(), 195.0, 205.0, 10_000);
        assert!((oracle - 200.0).abs() <= 1e-3);
        let init = EchoComponent { mu: 203.0, ..truth() };
        let set = fit_memgo(0, &y, &[init], &FitConfig::default()).unwrap();
        assert!((set.components[0].mu - oracle).abs() < 0.05);
    }

    #[test]
    fn two_overlapping_pulses_beat_single_fit() {
        let a = EchoComponent { eta: 0.0, phi: 0.0, ..truth() };
        let b = EchoComponent { mu: 218.0, alpha: 0.9, ..a };
        let y = trace(&[a, b], 400);

        // Best single component: grid over mu with the other parameters of
        // the stronger pulse.
        let single_mu = grid_search_mu(&y, a, 190.0, 230.0, 4000);
        let single_loss = memgo_loss(&[EchoComponent { mu: single_mu, ..a }], &y).unwrap();

        let init = [
            EchoComponent { mu: 201.5, alpha: 1.0, ..a },
            EchoComponent { mu: 216.0, alpha: 1.0, ..b },
        ];
        let set = fit_memgo(0, &y, &init, &FitConfig::default()).unwrap();
        assert_eq!(set.components.len(), 2);
        assert!(set.fit_residual < single_loss, "{set:?} {single_loss}");
        assert!(set.components[0].mu < set.components[1].mu);
    }

    #[test]
    fn finite_difference_mode_agrees() {
        let y = trace(&[truth()], 400);
        let init = EchoComponent { mu: 201.0, ..truth() };
        let cfg = FitConfig {
            jacobian: JacobianMode::FiniteDifference,
            ..FitConfig::default()
        };
        let set = fit_memgo(0, &y, &[init], &cfg).unwrap();
        assert!((set.components[0].mu - 200.0).abs() < 0.05);
    }

    #[test]
    fn loss_never_increases() {
        let y = trace(&[truth()], 400);
        let init = EchoComponent { mu: 190.0, sigma: 15.0, omega: 1.1, ..truth() };
        let before = memgo_loss(&[init], &y).unwrap();
        let set = fit_memgo(0, &y, &[init], &FitConfig::default()).unwrap();
        assert!(set.fit_residual <= before);
    }

    #[test]
    fn empty_initial_is_error() {
        assert!(fit_memgo(0, &[0.0; 32], &[], &FitConfig::default()).is_err());
    }

    #[test]
    fn canonical_form_has_positive_amplitude() {
        let c = canonicalize(EchoComponent { alpha: -2.0, phi: 0.5, ..truth() });
        assert_eq!(c.alpha, 2.0);
        assert!((c.phi - (0.5 - std::f64::consts::PI)).abs() < 1e-12);
        // Same waveform either way.
        let orig = EchoComponent { alpha: -2.0, phi: 0.5, ..truth() };
        for t in [190.0, 200.0, 207.0] {
            assert!((c.value(t) - orig.value(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_channel_end_to_end() {
        let y = trace(&[truth(), EchoComponent { mu: 320.0, ..truth() }], 512);
        let cfg = FitConfig::default();
        let set = fit_channel(4, &y, &cfg).unwrap();
        assert_eq!(set.channel_index, 4);
        assert_eq!(set.components.len(), 2);
        assert!((set.components[0].mu - 200.0).abs() < 1e-4);
        assert!((set.components[1].mu - 320.0).abs() < 1e-4);
    }
}
