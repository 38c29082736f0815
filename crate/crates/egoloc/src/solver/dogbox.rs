//! Bound-constrained dogleg trust-region minimizer for small dense
//! nonlinear least-squares problems.
//!
//! Minimizes 0.5 * ||F(x)||^2 subject to box bounds. Each iteration builds the
//! classic dogleg path from the steepest-descent (Cauchy) step and the
//! Gauss-Newton step, restricted to the subspace of variables that are not
//! pinned at an active bound, then clips the step against the box. Steps are
//! accepted or rejected on the gain ratio between actual and model cost
//! reduction.
//!
//! The residual closure may return `None` to flag an infeasible trial point
//! (e.g. a model point behind the camera); such points behave as infinite
//! cost, so the trust region shrinks back toward feasibility instead of the
//! solver crashing.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Gain-ratio thresholds for the trust-region update.
const ACCEPT_RATIO: f64 = 0.0001;
const SHRINK_RATIO: f64 = 0.25;
const EXPAND_RATIO: f64 = 0.75;
const SHRINK_FACTOR: f64 = 0.25;
const EXPAND_FACTOR: f64 = 2.0;
const MAX_RADIUS: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct DogboxConfig {
    /// Relative cost-decrease threshold of an accepted step.
    pub ftol: f64,
    /// Step-size threshold, relative to ||x||.
    pub xtol: f64,
    /// Infinity-norm threshold on the projected gradient.
    pub gtol: f64,
    pub max_iterations: usize,
    pub initial_trust_radius: f64,
}

impl Default for DogboxConfig {
    fn default() -> Self {
        Self {
            ftol: 1e-8,
            xtol: 1e-8,
            gtol: 1e-8,
            max_iterations: 50,
            initial_trust_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Relative cost change of an accepted step fell below `ftol`.
    CostTolerance,
    /// Step norm fell below `xtol * (xtol + ||x||)`, or the trust region
    /// collapsed.
    StepTolerance,
    /// Projected gradient infinity norm fell below `gtol`.
    GradientTolerance,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct DogboxReport {
    pub x: DVector<f64>,
    /// 0.5 * ||F(x)||^2 at the returned point.
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl DogboxReport {
    pub fn converged(&self) -> bool {
        self.termination != Termination::IterationLimit
    }
}

#[derive(Debug, Error)]
pub enum DogboxError {
    #[error("residuals cannot be evaluated at the initial point")]
    InfeasibleStart,
    #[error("lower bound must be strictly below upper bound for every variable")]
    InvalidBounds,
    #[error("jacobian evaluation failed at an accepted point")]
    JacobianFailure,
    #[error("normal equations are singular and steepest descent produced no descent")]
    SingularNormalEquations,
}

/// Runs the bounded dogleg iteration from `initial` (clamped strictly inside
/// the box when it sits on a bound).
pub fn dogbox_minimize<R, J>(
    mut residuals: R,
    mut jacobian: J,
    initial: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    config: &DogboxConfig,
) -> Result<DogboxReport, DogboxError>
where
    R: FnMut(&DVector<f64>) -> Option<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Option<DMatrix<f64>>,
{
    let n = initial.len();
    if lower.len() != n || upper.len() != n {
        return Err(DogboxError::InvalidBounds);
    }
    for j in 0..n {
        if !(lower[j] < upper[j]) {
            return Err(DogboxError::InvalidBounds);
        }
    }

    let mut x = initial.clone();
    clamp_inward(&mut x, lower, upper);

    let mut f = match residuals(&x) {
        Some(f) if f.iter().all(|v| v.is_finite()) => f,
        _ => return Err(DogboxError::InfeasibleStart),
    };
    let mut cost = 0.5 * f.norm_squared();
    let mut radius = if config.initial_trust_radius > 0.0 {
        config.initial_trust_radius
    } else {
        1.0
    };

    let mut iterations = 0;
    let mut termination = Termination::IterationLimit;

    'outer: while iterations < config.max_iterations {
        let jac = match jacobian(&x) {
            Some(j) if j.iter().all(|v| v.is_finite()) => j,
            _ => return Err(DogboxError::JacobianFailure),
        };
        let grad = jac.transpose() * &f;

        // Variables resting on a bound with the gradient pushing outward are
        // pinned: excluded from the step subspace and from the optimality
        // measure.
        let free: Vec<usize> = (0..n)
            .filter(|&j| {
                !((x[j] <= lower[j] && grad[j] > 0.0) || (x[j] >= upper[j] && grad[j] < 0.0))
            })
            .collect();

        let projected_grad_norm = free
            .iter()
            .map(|&j| grad[j].abs())
            .fold(0.0_f64, f64::max);
        if projected_grad_norm < config.gtol {
            termination = Termination::GradientTolerance;
            break;
        }

        let jac_free = jac.select_columns(free.iter());
        let grad_free = DVector::from_iterator(free.len(), free.iter().map(|&j| grad[j]));

        // Cauchy point along -grad in the free subspace.
        let jg = &jac_free * &grad_free;
        let jg_norm_sq = jg.norm_squared();
        let sd_step = if jg_norm_sq > 0.0 {
            Some(-&grad_free * (grad_free.norm_squared() / jg_norm_sq))
        } else {
            None
        };

        // Gauss-Newton step: minimum-norm least-squares solution, so rank
        // deficiency degrades gracefully instead of erroring.
        let gn_step = jac_free
            .clone()
            .svd(true, true)
            .solve(&(-&f), 1e-12)
            .ok()
            .filter(|p| p.iter().all(|v| v.is_finite()));

        if gn_step.is_none() && sd_step.is_none() {
            return Err(DogboxError::SingularNormalEquations);
        }

        let (dogleg_free, hit_region_boundary) = dogleg_step(&gn_step, &sd_step, radius);

        // Scatter into full space and clip against the box.
        let mut step = DVector::zeros(n);
        for (k, &j) in free.iter().enumerate() {
            step[j] = dogleg_free[k];
        }
        let (mut fraction, mut limiting) = max_feasible_fraction(&x, &step, lower, upper);
        if fraction <= 0.0 {
            // The Gauss-Newton leg pushed straight out of the box; retry with
            // the steepest-descent segment, which always points inward for
            // free variables.
            if let Some(sd) = &sd_step {
                let sd_clipped = clip_to_radius(sd, radius);
                step.fill(0.0);
                for (k, &j) in free.iter().enumerate() {
                    step[j] = sd_clipped[k];
                }
                let (frac, lim) = max_feasible_fraction(&x, &step, lower, upper);
                fraction = frac;
                limiting = lim;
            }
            if fraction <= 0.0 {
                return Err(DogboxError::SingularNormalEquations);
            }
        }

        let mut x_new = &x + &step * fraction;
        for &j in &limiting {
            x_new[j] = if step[j] > 0.0 { upper[j] } else { lower[j] };
        }
        for j in 0..n {
            x_new[j] = x_new[j].clamp(lower[j], upper[j]);
        }
        let taken = &x_new - &x;

        // Model reduction of the quadratic 0.5||F + J p||^2 for the step
        // actually taken.
        let jp = &jac * &taken;
        let predicted = -(grad.dot(&taken) + 0.5 * jp.norm_squared());

        let f_new = residuals(&x_new);
        let cost_new = match &f_new {
            Some(f) if f.iter().all(|v| v.is_finite()) => 0.5 * f.norm_squared(),
            _ => f64::INFINITY,
        };
        let actual = cost - cost_new;
        let ratio = if predicted > f64::MIN_POSITIVE {
            actual / predicted
        } else if actual > 0.0 {
            1.0
        } else {
            0.0
        };

        iterations += 1;

        let accepted = ratio > ACCEPT_RATIO && actual > 0.0;
        if accepted {
            let step_norm = taken.norm();
            let relative_drop = actual / cost.max(f64::MIN_POSITIVE);
            x = x_new;
            f = f_new.expect("finite cost implies residuals");
            cost = cost_new;
            if relative_drop < config.ftol {
                termination = Termination::CostTolerance;
                break 'outer;
            }
            if step_norm < config.xtol * (config.xtol + x.norm()) {
                termination = Termination::StepTolerance;
                break 'outer;
            }
        }

        if ratio < SHRINK_RATIO {
            radius *= SHRINK_FACTOR;
        } else if ratio > EXPAND_RATIO && hit_region_boundary {
            radius = (radius * EXPAND_FACTOR).min(MAX_RADIUS);
        }
        if radius < 1e-14 * x.norm().max(1.0) {
            termination = Termination::StepTolerance;
            break;
        }
    }

    Ok(DogboxReport {
        x,
        cost,
        iterations,
        termination,
    })
}

/// Nudges components sitting on (or past) a bound strictly inside by 1e-9 of
/// the range.
fn clamp_inward(x: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for j in 0..x.len() {
        let range = upper[j] - lower[j];
        let margin = if range.is_finite() {
            1e-9 * range
        } else {
            1e-9 * (1.0 + lower[j].abs().min(upper[j].abs()))
        };
        if lower[j].is_finite() && x[j] <= lower[j] {
            x[j] = lower[j] + margin;
        }
        if upper[j].is_finite() && x[j] >= upper[j] {
            x[j] = upper[j] - margin;
        }
    }
}

fn clip_to_radius(p: &DVector<f64>, radius: f64) -> DVector<f64> {
    let norm = p.norm();
    if norm > radius {
        p * (radius / norm)
    } else {
        p.clone()
    }
}

/// Classic dogleg path selection within a spherical region of `radius`.
/// Returns the step and whether it touches the region boundary.
fn dogleg_step(
    gn: &Option<DVector<f64>>,
    sd: &Option<DVector<f64>>,
    radius: f64,
) -> (DVector<f64>, bool) {
    match (gn, sd) {
        (Some(gn), _) if gn.norm() <= radius => {
            let hit = gn.norm() >= radius * (1.0 - 1e-12);
            (gn.clone(), hit)
        }
        (gn_opt, Some(sd)) => {
            let sd_norm = sd.norm();
            if sd_norm >= radius {
                (sd * (radius / sd_norm), true)
            } else if let Some(gn) = gn_opt {
                // Second leg: ||sd + tau (gn - sd)|| = radius, tau in (0, 1].
                let d = gn - sd;
                let a = d.norm_squared();
                let b = 2.0 * sd.dot(&d);
                let c = sd.norm_squared() - radius * radius;
                let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
                let tau = if a > 0.0 { (-b + disc) / (2.0 * a) } else { 0.0 };
                (sd + d * tau.clamp(0.0, 1.0), true)
            } else {
                (sd.clone(), false)
            }
        }
        (Some(gn), None) => {
            let norm = gn.norm();
            if norm > radius {
                (gn * (radius / norm), true)
            } else {
                (gn.clone(), false)
            }
        }
        (None, None) => unreachable!("caller guarantees at least one step exists"),
    }
}

/// Largest fraction of `step` that keeps `x + fraction * step` inside the
/// box, along with the indices that limit it.
fn max_feasible_fraction(
    x: &DVector<f64>,
    step: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> (f64, Vec<usize>) {
    let mut fraction = 1.0_f64;
    for j in 0..x.len() {
        if step[j] == 0.0 {
            continue;
        }
        let room = if step[j] > 0.0 {
            upper[j] - x[j]
        } else {
            lower[j] - x[j]
        };
        let frac = (room / step[j]).max(0.0);
        if frac < fraction {
            fraction = frac;
        }
    }
    let limiting = (0..x.len())
        .filter(|&j| {
            step[j] != 0.0 && {
                let room = if step[j] > 0.0 {
                    upper[j] - x[j]
                } else {
                    lower[j] - x[j]
                };
                (room / step[j]).max(0.0) <= fraction * (1.0 + 1e-12)
            }
        })
        .collect();
    (fraction.min(1.0), if fraction < 1.0 { limiting } else { Vec::new() })
}
