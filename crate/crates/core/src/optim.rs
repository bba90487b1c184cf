//! Matching solvers on landmark space: geodesic shooting in the initial
//! momentum, an augmented Lagrangian method over per-step controls, and an
//! exhaustive control-space search for cross-checking tiny instances.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesics::{backward_sweep, flow_controlled, integrate_geodesic, Trajectory};
use crate::shapes::MatchProblem;

/// Backtracking line search parameters (sufficient decrease test).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmijoOptions {
    pub c1: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
}

impl Default for ArmijoOptions {
    fn default() -> Self {
        ArmijoOptions {
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 40,
            initial_step: 1.0,
        }
    }
}

/// Augmented Lagrangian outer-loop parameters. The penalty weight is
/// `1/(2 mu)`, so `mu` shrinks (down to `mu_min`) to tighten constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlOptions {
    pub mu0: f64,
    pub mu_shrink: f64,
    pub mu_min: f64,
    pub constraint_tol: f64,
}

impl Default for AlOptions {
    fn default() -> Self {
        AlOptions {
            mu0: 1.0,
            mu_shrink: 0.5,
            mu_min: 1e-6,
            constraint_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Descent stops when the gradient norm falls below
    /// `grad_tol * (1 + first iterate's gradient norm)`.
    pub grad_tol: f64,
    pub armijo: ArmijoOptions,
    pub al: AlOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer_iters: 30,
            max_inner_iters: 400,
            grad_tol: 1e-6,
            armijo: ArmijoOptions::default(),
            al: AlOptions::default(),
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let a = &self.armijo;
        let l = &self.al;
        let ok = self.max_outer_iters >= 1
            && self.max_inner_iters >= 1
            && self.grad_tol > 0.0
            && a.c1 > 0.0
            && a.c1 < 1.0
            && a.shrink > 0.0
            && a.shrink < 1.0
            && a.initial_step > 0.0
            && l.mu0 > 0.0
            && l.mu_shrink > 0.0
            && l.mu_shrink < 1.0
            && l.mu_min > 0.0
            && l.mu_min <= l.mu0
            && l.constraint_tol > 0.0;
        if !ok {
            return Err(Error::InvalidInput(
                "solver options out of range (tolerances and steps must be positive, \
                 ratios strictly inside (0, 1))"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxOuterIterations,
    MaxInnerIterations,
    LineSearchStalled,
}

/// Summary of a solve. `objective` always equals `kinetic_energy +
/// attachment`, both recomputable from the returned trajectory alone:
/// kinetic energy is the trapezoid rule over the per-node energy records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub objective: f64,
    pub kinetic_energy: f64,
    pub attachment: f64,
    pub constraint_violation: f64,
    pub grad_norm: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub termination: Termination,
    pub mu_history: Vec<f64>,
    pub violation_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub report: SolveReport,
}

/// Trapezoid rule over the trajectory's per-node energy records.
pub fn path_energy(traj: &Trajectory) -> f64 {
    let n = traj.n_steps();
    let dt = 1.0 / n as f64;
    (0..n)
        .map(|i| 0.5 * dt * (traj.energy[i] + traj.energy[i + 1]))
        .sum()
}

fn recoverable(err: &Error) -> bool {
    matches!(err, Error::BlowUp { .. } | Error::SingularConstraint { .. })
}

// ---------------------------------------------------------------------------
// Geodesic shooting
// ---------------------------------------------------------------------------

/// Shooting objective: conserved path energy of the geodesic from `p0` plus
/// terminal attachment.
pub fn shooting_objective(
    problem: &MatchProblem,
    p0: &[f64],
    n_steps: usize,
) -> Result<(f64, Trajectory)> {
    let traj = integrate_geodesic(
        &problem.kernels,
        &problem.constraints,
        &problem.q0,
        p0,
        n_steps,
    )?;
    let (attach, _) = problem.attachment_and_grad(&traj.final_state())?;
    Ok((traj.energy[0] + attach, traj))
}

/// Shooting objective and its gradient in `p0`: the initial velocity of the
/// flow plus the backward-swept attachment gradient.
pub fn shooting_gradient(
    problem: &MatchProblem,
    p0: &[f64],
    n_steps: usize,
) -> Result<(f64, DVector<f64>, Trajectory)> {
    let traj = integrate_geodesic(
        &problem.kernels,
        &problem.constraints,
        &problem.q0,
        p0,
        n_steps,
    )?;
    let (attach, attach_grad) = problem.attachment_and_grad(&traj.final_state())?;
    let swept = backward_sweep(
        &problem.kernels,
        &problem.constraints,
        &traj,
        attach_grad.as_slice(),
    )?;
    let velocity0 = if problem.constraints.is_empty() {
        problem.kernels.apply(&problem.q0, p0)
    } else {
        problem
            .constraints
            .solve_lambda(&problem.kernels, &problem.q0, p0, None)?
            .velocity
    };
    Ok((traj.energy[0] + attach, velocity0 + swept.alpha, traj))
}

/// Largest per-node feasibility residual of a momentum-carrying trajectory.
fn shooting_violation(problem: &MatchProblem, traj: &Trajectory) -> Result<f64> {
    if problem.constraints.is_empty() {
        return Ok(0.0);
    }
    let momenta = traj
        .momenta
        .as_ref()
        .expect("shooting trajectory carries momenta");
    let mut worst = 0.0f64;
    for (i, p) in momenta.iter().enumerate() {
        let qs = traj.state_at(i);
        let solve = problem
            .constraints
            .solve_lambda(&problem.kernels, &qs, p.as_slice(), None)?;
        let res = problem
            .constraints
            .value(&problem.kernels, &qs, solve.projected.as_slice())?;
        worst = worst.max(res.amax());
    }
    Ok(worst)
}

/// Gradient descent with backtracking on the initial momentum, starting from
/// rest. Requires a constraint set the geodesic flow supports (momentum-space
/// rows only).
pub fn minimize_shooting(
    problem: &MatchProblem,
    n_steps: usize,
    options: &SolverOptions,
) -> Result<Solution> {
    options.validate()?;
    let nd = problem.q0.nd();
    let mut p0 = DVector::zeros(nd);
    let (mut value, mut grad, mut traj) = shooting_gradient(problem, p0.as_slice(), n_steps)?;
    let mut grad_norm = grad.norm();
    let tol = options.grad_tol * (1.0 + grad_norm);
    let mut grad_history = vec![grad_norm];
    let mut iterations = 0;
    let mut termination = Termination::MaxInnerIterations;

    while iterations < options.max_inner_iters {
        if grad_norm <= tol {
            termination = Termination::Converged;
            break;
        }
        let slope = grad.norm_squared();
        let mut step = options.armijo.initial_step;
        let mut accepted = None;
        for _ in 0..=options.armijo.max_backtracks {
            let trial = &p0 - &grad * step;
            match shooting_objective(problem, trial.as_slice(), n_steps) {
                Ok((v, t)) if v <= value - options.armijo.c1 * step * slope => {
                    accepted = Some((trial, v, t));
                    break;
                }
                Ok(_) => step *= options.armijo.shrink,
                Err(e) if recoverable(&e) => step *= options.armijo.shrink,
                Err(e) => return Err(e),
            }
        }
        let Some((next, next_value, _)) = accepted else {
            termination = Termination::LineSearchStalled;
            break;
        };
        p0 = next;
        value = next_value;
        let (_, g, t) = shooting_gradient(problem, p0.as_slice(), n_steps)?;
        grad = g;
        traj = t;
        grad_norm = grad.norm();
        grad_history.push(grad_norm);
        iterations += 1;
    }
    if grad_norm <= tol {
        termination = Termination::Converged;
    }

    let kinetic = path_energy(&traj);
    let (attach, _) = problem.attachment_and_grad(&traj.final_state())?;
    let violation = shooting_violation(problem, &traj)?;
    Ok(Solution {
        trajectory: traj,
        report: SolveReport {
            objective: kinetic + attach,
            kinetic_energy: kinetic,
            attachment: attach,
            constraint_violation: violation,
            grad_norm,
            inner_iterations: iterations,
            outer_iterations: 0,
            termination,
            mu_history: Vec::new(),
            violation_history: Vec::new(),
            grad_norm_history: grad_history,
        },
    })
}

// ---------------------------------------------------------------------------
// Augmented Lagrangian over per-step controls
// ---------------------------------------------------------------------------

/// One augmented Lagrangian objective/gradient evaluation at fixed
/// multipliers and penalty.
#[derive(Debug, Clone)]
pub struct AlGradient {
    pub value: f64,
    pub trajectory: Trajectory,
    /// Per-step kernel-metric gradients (endpoint-averaged).
    pub metric_grads: Vec<DVector<f64>>,
    /// Per-step flat gradients: `d value / d u_i = dt * flat_grads[i]`.
    pub flat_grads: Vec<DVector<f64>>,
    /// Per-step endpoint-averaged constraint values of the controls.
    pub step_residuals: Vec<DVector<f64>>,
    /// Largest entry of the step residuals.
    pub violation: f64,
}

struct AlForward {
    value: f64,
    trajectory: Trajectory,
    step_residuals: Vec<DVector<f64>>,
}

fn al_forward(
    problem: &MatchProblem,
    controls: &[DVector<f64>],
    multipliers: &[DVector<f64>],
    mu: f64,
) -> Result<AlForward> {
    let traj = flow_controlled(&problem.kernels, &problem.q0, controls)?;
    let n = controls.len();
    let dt = 1.0 / n as f64;
    let cs = &problem.constraints;
    let k = cs.rows(&problem.q0)?;
    let mut value = 0.0;
    let mut step_residuals = Vec::with_capacity(n);
    for (i, u) in controls.iter().enumerate() {
        let q_lo = traj.state_at(i);
        let q_hi = traj.state_at(i + 1);
        let e_lo = traj.energy[i];
        let e_hi = 0.5 * u.dot(&problem.kernels.apply(&q_hi, u.as_slice()));
        let mut l_lo = e_lo;
        let mut l_hi = e_hi;
        if k > 0 {
            let phi_lo = cs.value(&problem.kernels, &q_lo, u.as_slice())?;
            let phi_hi = cs.value(&problem.kernels, &q_hi, u.as_slice())?;
            let lam = &multipliers[i];
            l_lo += -lam.dot(&phi_lo) + phi_lo.norm_squared() / (2.0 * mu);
            l_hi += -lam.dot(&phi_hi) + phi_hi.norm_squared() / (2.0 * mu);
            step_residuals.push((phi_lo + phi_hi) * 0.5);
        } else {
            step_residuals.push(DVector::zeros(0));
        }
        value += 0.5 * dt * (l_lo + l_hi);
    }
    let (attach, _) = problem.attachment_and_grad(&traj.final_state())?;
    value += attach;
    Ok(AlForward {
        value,
        trajectory: traj,
        step_residuals,
    })
}

/// Augmented Lagrangian value and gradient at fixed multipliers/penalty.
///
/// The costate solves the control-problem adjoint equation backward from the
/// attachment gradient; the per-step gradient averages the two endpoint
/// evaluations, matching the trapezoid discretization of the running cost.
pub fn al_gradient(
    problem: &MatchProblem,
    controls: &[DVector<f64>],
    multipliers: &[DVector<f64>],
    mu: f64,
) -> Result<AlGradient> {
    let fwd = al_forward(problem, controls, multipliers, mu)?;
    let traj = &fwd.trajectory;
    let n = controls.len();
    let dt = 1.0 / n as f64;
    let kernels = &problem.kernels;
    let cs = &problem.constraints;
    let k = cs.rows(&problem.q0)?;

    let (_, attach_grad) = problem.attachment_and_grad(&traj.final_state())?;
    let mut p = attach_grad;

    // Costate rhs at a point along step i (fixed control and multiplier):
    // dp/dt = -grad_q[(p + u/2)^T K_q u] + T_q(lambda - Phi_q(u)/mu, u)
    // where T_q(w, u) = grad_q of w^T Phi_q(u).
    let rhs = |coords: &DVector<f64>,
               p: &DVector<f64>,
               u: &DVector<f64>,
               lam: &DVector<f64>|
     -> Result<DVector<f64>> {
        let qs = traj.base().with_coords(coords.as_slice().to_vec())?;
        let carrier = p + u * 0.5;
        let mut out = kernels.grad_quadratic(&qs, carrier.as_slice(), u.as_slice()) * -1.0;
        if k > 0 {
            let phi = cs.value(kernels, &qs, u.as_slice())?;
            let w = lam - phi / mu;
            out += cs.value_grad_q(kernels, &qs, w.as_slice(), u.as_slice())?;
        }
        Ok(out)
    };

    // Node gradient of the running cost in the kernel metric:
    // G = u + p - representer(lambda - Phi_q(u)/mu).
    let node_grad = |qs: &crate::shapes::LandmarkState,
                     p: &DVector<f64>,
                     u: &DVector<f64>,
                     lam: &DVector<f64>|
     -> Result<(DVector<f64>, DVector<f64>)> {
        let mut g = u + p;
        if k > 0 {
            let phi = cs.value(kernels, qs, u.as_slice())?;
            let w = lam - phi / mu;
            g -= cs.representer(kernels, qs, w.as_slice())?;
        }
        let flat = kernels.apply(qs, g.as_slice());
        Ok((g, flat))
    };

    let mut metric_grads = vec![DVector::zeros(0); n];
    let mut flat_grads = vec![DVector::zeros(0); n];
    let zero_lam = DVector::zeros(k);
    for i in (0..n).rev() {
        let u = &controls[i];
        let lam = if k > 0 { &multipliers[i] } else { &zero_lam };
        let q_lo = &traj.positions[i];
        let q_hi = &traj.positions[i + 1];
        let q_mid = (q_lo + q_hi) * 0.5;

        let hi_state = traj.state_at(i + 1);
        let (g_hi, flat_hi) = node_grad(&hi_state, &p, u, lam)?;

        // RK4 backward over [t_i, t_{i+1}] with linear node interpolation.
        let k1 = rhs(q_hi, &p, u, lam)?;
        let k2 = rhs(&q_mid, &(&p - &k1 * (0.5 * dt)), u, lam)?;
        let k3 = rhs(&q_mid, &(&p - &k2 * (0.5 * dt)), u, lam)?;
        let k4 = rhs(q_lo, &(&p - &k3 * dt), u, lam)?;
        p -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

        let lo_state = traj.state_at(i);
        let (g_lo, flat_lo) = node_grad(&lo_state, &p, u, lam)?;
        metric_grads[i] = (g_lo + g_hi) * 0.5;
        flat_grads[i] = (flat_lo + flat_hi) * 0.5;
    }

    let violation = fwd
        .step_residuals
        .iter()
        .map(|r| if r.is_empty() { 0.0 } else { r.amax() })
        .fold(0.0, f64::max);
    Ok(AlGradient {
        value: fwd.value,
        trajectory: fwd.trajectory,
        metric_grads,
        flat_grads,
        step_residuals: fwd.step_residuals,
        violation,
    })
}

fn al_grad_norm(grads: &[DVector<f64>]) -> f64 {
    let dt = 1.0 / grads.len() as f64;
    grads
        .iter()
        .map(|g| dt * g.norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Augmented Lagrangian matching: inner Armijo descent over the per-step
/// controls, outer multiplier updates from the endpoint-averaged constraint
/// residuals, and keep-or-halve penalty tightening.
pub fn minimize_augmented_lagrangian(
    problem: &MatchProblem,
    n_steps: usize,
    options: &SolverOptions,
) -> Result<Solution> {
    options.validate()?;
    if n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be >= 1".to_string()));
    }
    let nd = problem.q0.nd();
    let k = problem.constraints.rows(&problem.q0)?;
    let mut u = vec![DVector::zeros(nd); n_steps];
    let mut lam = vec![DVector::zeros(k); n_steps];
    let mut mu = options.al.mu0;

    let mut grad = al_gradient(problem, &u, &lam, mu)?;
    let mut grad_norm = al_grad_norm(&grad.metric_grads);
    let tol = options.grad_tol * (1.0 + grad_norm);

    let mut inner_total = 0;
    let mut outer_done = 0;
    let mut termination = Termination::MaxOuterIterations;
    let mut mu_history = Vec::new();
    let mut violation_history = Vec::new();
    let mut grad_norm_history = Vec::new();
    let mut prev_violation = f64::INFINITY;

    let outer_cap = if k == 0 { 1 } else { options.max_outer_iters };
    let dt = 1.0 / n_steps as f64;

    'outer: for _ in 0..outer_cap {
        outer_done += 1;
        let mut inner_converged = false;
        let mut inner_stalled = false;
        for _ in 0..options.max_inner_iters {
            if grad_norm <= tol {
                inner_converged = true;
                break;
            }
            // Predicted decrease of the trapezoid objective along the
            // kernel-metric descent direction.
            let slope: f64 = grad
                .metric_grads
                .iter()
                .zip(&grad.flat_grads)
                .map(|(g, f)| dt * g.dot(f))
                .sum();
            // Negated form on purpose: a NaN slope must stall, not descend.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(slope > 0.0) {
                inner_stalled = true;
                break;
            }
            let mut step = options.armijo.initial_step;
            let mut accepted = None;
            for _ in 0..=options.armijo.max_backtracks {
                let trial: Vec<DVector<f64>> = u
                    .iter()
                    .zip(&grad.metric_grads)
                    .map(|(ui, gi)| ui - gi * step)
                    .collect();
                match al_forward(problem, &trial, &lam, mu) {
                    Ok(f) if f.value <= grad.value - options.armijo.c1 * step * slope => {
                        accepted = Some(trial);
                        break;
                    }
                    Ok(_) => step *= options.armijo.shrink,
                    Err(e) if recoverable(&e) => step *= options.armijo.shrink,
                    Err(e) => return Err(e),
                }
            }
            let Some(next) = accepted else {
                inner_stalled = true;
                break;
            };
            u = next;
            grad = al_gradient(problem, &u, &lam, mu)?;
            grad_norm = al_grad_norm(&grad.metric_grads);
            inner_total += 1;
        }
        if !inner_converged && !inner_stalled {
            // Inner budget exhausted without meeting the gradient tolerance.
            termination = Termination::MaxInnerIterations;
        }

        mu_history.push(mu);
        violation_history.push(grad.violation);
        grad_norm_history.push(grad_norm);

        if k == 0 {
            termination = if inner_converged {
                Termination::Converged
            } else if inner_stalled {
                Termination::LineSearchStalled
            } else {
                Termination::MaxInnerIterations
            };
            break 'outer;
        }
        if grad.violation <= options.al.constraint_tol && (inner_converged || inner_stalled) {
            termination = if inner_converged {
                Termination::Converged
            } else {
                Termination::LineSearchStalled
            };
            break 'outer;
        }

        for (l, r) in lam.iter_mut().zip(&grad.step_residuals) {
            *l -= r / mu;
        }
        if grad.violation > 0.1 * prev_violation {
            mu = (mu * options.al.mu_shrink).max(options.al.mu_min);
        }
        prev_violation = grad.violation;
        // Multipliers and penalty changed: refresh the gradient state.
        grad = al_gradient(problem, &u, &lam, mu)?;
        grad_norm = al_grad_norm(&grad.metric_grads);
    }

    let traj = grad.trajectory;
    let kinetic = path_energy(&traj);
    let (attach, _) = problem.attachment_and_grad(&traj.final_state())?;
    Ok(Solution {
        trajectory: traj,
        report: SolveReport {
            objective: kinetic + attach,
            kinetic_energy: kinetic,
            attachment: attach,
            constraint_violation: grad.violation,
            grad_norm,
            inner_iterations: inner_total,
            outer_iterations: outer_done,
            termination,
            mu_history,
            violation_history,
            grad_norm_history,
        },
    })
}

// ---------------------------------------------------------------------------
// Exhaustive oracle
// ---------------------------------------------------------------------------

/// Deterministic pattern search over the full space of per-step controls,
/// with constraints enforced by a fixed quadratic penalty. Only intended for
/// cross-checking the structured solvers on tiny instances; returns the
/// unpenalized objective (path energy plus attachment) at the best point.
pub fn brute_force_oracle(problem: &MatchProblem, n_steps: usize) -> Result<f64> {
    let nd = problem.q0.nd();
    if nd > 4 {
        return Err(Error::InstanceTooLarge(format!(
            "oracle handles at most 4 state coordinates, got {}",
            nd
        )));
    }
    if n_steps == 0 || n_steps > 5 {
        return Err(Error::InstanceTooLarge(format!(
            "oracle handles 1..=5 steps, got {}",
            n_steps
        )));
    }
    let dim = nd * n_steps;
    let dt = 1.0 / n_steps as f64;
    let k = problem.constraints.rows(&problem.q0)?;
    let penalty = 1e6;

    let split =
        |x: &[f64]| -> Vec<DVector<f64>> { x.chunks(nd).map(DVector::from_column_slice).collect() };
    // (penalized, unpenalized) objective; infeasible evaluations are +inf.
    let eval = |x: &[f64]| -> (f64, f64) {
        let controls = split(x);
        let fwd = match al_forward(
            problem,
            &controls,
            &vec![DVector::zeros(k); n_steps],
            f64::INFINITY,
        ) {
            Ok(f) => f,
            Err(_) => return (f64::INFINITY, f64::INFINITY),
        };
        // With mu = inf the forward value reduces to trapezoid kinetic plus
        // attachment (multiplier and penalty terms vanish at lambda = 0).
        let mut penalized = fwd.value;
        for r in &fwd.step_residuals {
            if !r.is_empty() {
                penalized += penalty * dt * r.norm_squared();
            }
        }
        (penalized, fwd.value)
    };

    let mut x = vec![0.0; dim];
    let (mut fx, mut plain) = eval(&x);
    let mut step = 1.0;
    let mut evals = 0usize;
    while step > 1e-5 && evals < 400_000 {
        let mut improved = false;
        for j in 0..dim {
            for sgn in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[j] += sgn * step;
                let (ft, pt) = eval(&trial);
                evals += 1;
                if ft < fx {
                    x = trial;
                    fx = ft;
                    plain = pt;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(plain)
}
