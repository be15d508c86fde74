//! Damped least squares (Levenberg–Marquardt) with a multiplicative damping
//! schedule, Marquardt diagonal scaling and optional geodesic acceleration.
//!
//! Geodesic acceleration adds the second-order correction `a / 2` to each
//! step `v`, where `a` solves the damped normal equations for the model's
//! second directional derivative along `v` (central differences). Steps
//! whose correction is large against `v` are rejected. This follows curved
//! valleys in parameter space that plain steps overshoot.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquaresProblem {
    /// Residuals `y - model(params)`.
    fn residuals(&self, params: &DVector<f64>) -> DVector<f64>;

    /// Jacobian of the model (not of the residuals) at `params`.
    fn model_jacobian(&self, params: &DVector<f64>) -> DMatrix<f64>;

    /// `(J^T J, J^T r)` for the model Jacobian `J` and the residuals `r` at
    /// `params`. Problems with sparse Jacobians can assemble these directly.
    fn normal_equations(&self, params: &DVector<f64>, residuals: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let jac = self.model_jacobian(params);
        (jac.tr_mul(&jac), jac.tr_mul(residuals))
    }

    /// `J^T v` for the model Jacobian at `params`.
    fn jacobian_transpose_mul(&self, params: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.model_jacobian(params).tr_mul(v)
    }

    /// Parameter sets outside the domain are treated as rejected steps.
    fn is_feasible(&self, _params: &DVector<f64>) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step improves the loss by less than this
    /// fraction.
    pub relative_tolerance: f64,
    pub geodesic_acceleration: bool,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_iterations: 100,
            relative_tolerance: 1e-8,
            geodesic_acceleration: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    pub loss: f64,
    pub iterations: usize,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LmDiverged {
    pub last_valid: DVector<f64>,
    pub iterations: usize,
}

const MAX_DAMPING: f64 = 1e16;
/// Finite-difference step, as a fraction of the step `v`, for the second
/// directional derivative.
const ACCEL_PROBE: f64 = 0.1;
/// Largest accepted `2 |a| / |v|` in the scaled norm.
const ACCEL_RATIO: f64 = 0.75;

pub fn levenberg_marquardt<P: LeastSquaresProblem>(
    problem: &P,
    initial: DVector<f64>,
    settings: &LmSettings,
) -> Result<LmOutcome, LmDiverged> {
    let mut params = initial;
    let mut residuals = problem.residuals(&params);
    let mut loss = residuals.norm_squared();
    if !loss.is_finite() {
        return Err(LmDiverged {
            last_valid: params,
            iterations: 0,
        });
    }
    let mut history = vec![loss];
    let mut damping = settings.initial_damping;
    let mut iterations = 0;

    'outer: while iterations < settings.max_iterations && loss > 0.0 {
        iterations += 1;
        let (jtj, gradient) = problem.normal_equations(&params, &residuals);
        if jtj.iter().chain(gradient.iter()).any(|v| !v.is_finite()) {
            return Err(LmDiverged {
                last_valid: params,
                iterations,
            });
        }
        let diag_floor = jtj.diagonal().max() * 1e-12 + f64::MIN_POSITIVE;

        loop {
            let mut lhs = jtj.clone();
            for k in 0..lhs.nrows() {
                lhs[(k, k)] += damping * jtj[(k, k)].max(diag_floor);
            }
            let Some(ch) = lhs.cholesky() else {
                damping *= settings.damping_increase;
                if damping > MAX_DAMPING {
                    break 'outer;
                }
                continue;
            };
            let mut step = ch.solve(&gradient);
            if settings.geodesic_acceleration {
                let accel = acceleration(problem, &params, &residuals, &step).map(|m| -ch.solve(&m));
                let scaled = |x: &DVector<f64>| {
                    x.iter().enumerate().map(|(k, v)| jtj[(k, k)].max(diag_floor) * v * v).sum::<f64>().sqrt()
                };
                match accel {
                    Some(a) if 2.0 * scaled(&a) <= ACCEL_RATIO * scaled(&step) => step += 0.5 * a,
                    _ => {
                        damping *= settings.damping_increase;
                        if damping > MAX_DAMPING {
                            break 'outer;
                        }
                        continue;
                    }
                }
            }
            let candidate = &params + &step;
            if !problem.is_feasible(&candidate) {
                damping *= settings.damping_increase;
                if damping > MAX_DAMPING {
                    break 'outer;
                }
                continue;
            }
            let cand_residuals = problem.residuals(&candidate);
            let cand_loss = cand_residuals.norm_squared();
            if !cand_loss.is_finite() || candidate.iter().any(|v| !v.is_finite()) {
                return Err(LmDiverged {
                    last_valid: params,
                    iterations,
                });
            }
            if cand_loss <= loss {
                let improvement = (loss - cand_loss) / loss;
                params = candidate;
                residuals = cand_residuals;
                loss = cand_loss;
                history.push(loss);
                damping /= settings.damping_decrease;
                if improvement < settings.relative_tolerance {
                    break 'outer;
                }
                break;
            }
            damping *= settings.damping_increase;
            if damping > MAX_DAMPING {
                break 'outer;
            }
        }
    }

    Ok(LmOutcome {
        params,
        loss,
        iterations,
        loss_history: history,
    })
}

/// `J^T m_vv` for the model's second directional derivative `m_vv` along
/// `v`, or `None` if a probe point is infeasible.
fn acceleration<P: LeastSquaresProblem>(
    problem: &P,
    params: &DVector<f64>,
    residuals: &DVector<f64>,
    v: &DVector<f64>,
) -> Option<DVector<f64>> {
    let (ahead, behind) = (params + ACCEL_PROBE * v, params - ACCEL_PROBE * v);
    if !problem.is_feasible(&ahead) || !problem.is_feasible(&behind) {
        return None;
    }
    // Residuals are `y - model`, so the model's second difference has the
    // opposite sign.
    let second = (problem.residuals(&ahead) - 2.0 * residuals + problem.residuals(&behind)) / -(ACCEL_PROBE * ACCEL_PROBE);
    let out = problem.jacobian_transpose_mul(params, &second);
    out.iter().all(|x| x.is_finite()).then_some(out)
}
