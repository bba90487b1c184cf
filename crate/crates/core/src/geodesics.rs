//! Forward flows on landmark space (Hamiltonian geodesics and controlled
//! flows) and the backward transposed variational sweep that turns terminal
//! gradients into initial-momentum gradients.

use nalgebra::DVector;

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::kernels::GroupKernels;
use crate::shapes::LandmarkState;

/// A time-discretized flow on the uniform grid `t_i = i/N`.
///
/// Shooting trajectories carry momenta at the nodes; augmented Lagrangian
/// trajectories carry the per-step controls. Multiplier and energy records
/// are per node (multipliers empty when the constraint set is).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub(crate) base: LandmarkState,
    pub times: Vec<f64>,
    pub positions: Vec<DVector<f64>>,
    pub momenta: Option<Vec<DVector<f64>>>,
    pub controls: Option<Vec<DVector<f64>>>,
    pub multipliers: Vec<DVector<f64>>,
    pub energy: Vec<f64>,
    pub eps_history: Vec<f64>,
    pub integrator: &'static str,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Group template shared by all nodes (the initial state).
    pub fn base(&self) -> &LandmarkState {
        &self.base
    }

    /// The state at node `i`.
    pub fn state_at(&self, i: usize) -> LandmarkState {
        self.base
            .with_coords(self.positions[i].as_slice().to_vec())
            .expect("stored node has the base layout")
    }

    pub fn final_state(&self) -> LandmarkState {
        self.state_at(self.n_steps())
    }

    /// Largest relative drift of the recorded node energies.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energy[0];
        self.energy
            .iter()
            .map(|e| (e - e0).abs() / (1.0 + e0.abs()))
            .fold(0.0, f64::max)
    }

    /// Control applied on the step containing node `i` (last step's control
    /// extends to the final node).
    pub fn control_at_node(&self, i: usize) -> Option<&DVector<f64>> {
        self.controls
            .as_ref()
            .map(|u| &u[i.min(u.len().saturating_sub(1))])
    }
}

/// Adjoint pair returned by the backward sweep: `z` pairs with state
/// perturbations, `alpha` with momentum perturbations, both at time 0.
#[derive(Debug, Clone)]
pub struct BackwardState {
    pub z: DVector<f64>,
    pub alpha: DVector<f64>,
}

/// One evaluation of the constrained geodesic right-hand side.
#[derive(Debug, Clone)]
pub(crate) struct Stage {
    pub qdot: DVector<f64>,
    pub pdot: DVector<f64>,
    pub lambda: DVector<f64>,
    pub eps: f64,
    pub energy: f64,
    /// The field weights realizing qdot: the projected momentum.
    pub weights: DVector<f64>,
}

fn require_kinetic(cs: &ConstraintSet, q: &LandmarkState) -> Result<()> {
    if !cs.is_kinetic(q)? {
        return Err(Error::InvalidInput(
            "geodesic flow needs momentum-space constraint rows; cross-group rows \
             (sliding) are solved through the augmented Lagrangian path"
                .to_string(),
        ));
    }
    Ok(())
}

/// Kinetic energy of the state: `h = (pi_q p)^T K_q (pi_q p) / 2`, with the
/// projection dropped for an empty constraint set.
pub fn reduced_hamiltonian(
    kernels: &GroupKernels,
    cs: &ConstraintSet,
    q: &LandmarkState,
    p: &[f64],
) -> Result<f64> {
    if cs.is_empty() {
        let v = kernels.apply(q, p);
        return Ok(0.5 * dot(p, v.as_slice()));
    }
    require_kinetic(cs, q)?;
    let solve = cs.solve_lambda(kernels, q, p, None)?;
    Ok(0.5 * dot(solve.projected.as_slice(), solve.velocity.as_slice()))
}

pub(crate) fn stage_rhs(
    kernels: &GroupKernels,
    cs: &ConstraintSet,
    q: &LandmarkState,
    p: &[f64],
) -> Result<Stage> {
    if cs.is_empty() {
        let qdot = kernels.apply(q, p);
        let pdot = kernels.grad_quadratic(q, p, p) * -0.5;
        let energy = 0.5 * dot(p, qdot.as_slice());
        return Ok(Stage {
            qdot,
            pdot,
            lambda: DVector::zeros(0),
            eps: 0.0,
            energy,
            weights: DVector::from_column_slice(p),
        });
    }
    let solve = cs.solve_lambda(kernels, q, p, None)?;
    let pi_p = &solve.projected;
    let v = &solve.velocity;
    // The Hamiltonian flow of the projected kinetic energy: multipliers are
    // functions of the state, and the row-coefficient derivative enters the
    // momentum equation through its conjugate action on the velocity.
    let mut pdot = kernels.grad_quadratic(q, pi_p.as_slice(), pi_p.as_slice()) * -0.5;
    pdot += cs.dct_conjugate_action(q, solve.lambda.as_slice(), v.as_slice())?;
    let energy = 0.5 * dot(pi_p.as_slice(), v.as_slice());
    Ok(Stage {
        qdot: v.clone(),
        pdot,
        lambda: solve.lambda,
        eps: solve.eps,
        energy,
        weights: pi_p.clone(),
    })
}

/// Right-hand side of the (possibly constrained) geodesic equations.
pub fn geodesic_rhs(
    kernels: &GroupKernels,
    cs: &ConstraintSet,
    q: &LandmarkState,
    p: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !cs.is_empty() {
        require_kinetic(cs, q)?;
    }
    let stage = stage_rhs(kernels, cs, q, p)?;
    Ok((stage.qdot, stage.pdot))
}

fn check_magnitude(coords: &DVector<f64>, step: usize, threshold: f64) -> Result<()> {
    let magnitude = coords.amax();
    if !magnitude.is_finite() || magnitude > threshold {
        return Err(Error::BlowUp {
            step,
            magnitude,
            threshold,
        });
    }
    Ok(())
}

/// Integrates the geodesic flow from `(q0, p0)` with `n_steps` fixed RK4
/// steps, re-solving the multipliers at every stage.
pub fn integrate_geodesic(
    kernels: &GroupKernels,
    cs: &ConstraintSet,
    q0: &LandmarkState,
    p0: &[f64],
    n_steps: usize,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be >= 1".to_string()));
    }
    kernels.check_state(q0)?;
    if !cs.is_empty() {
        require_kinetic(cs, q0)?;
    }
    if p0.len() != q0.nd() {
        return Err(Error::ShapeMismatch(format!(
            "momentum length {} does not match state size {}",
            p0.len(),
            q0.nd()
        )));
    }
    let threshold = 1e8 * (1.0 + q0.max_abs());
    let h = 1.0 / n_steps as f64;

    let mut q = DVector::from_column_slice(q0.coords());
    let mut p = DVector::from_column_slice(p0);
    let mut positions = Vec::with_capacity(n_steps + 1);
    let mut momenta = Vec::with_capacity(n_steps + 1);
    let mut multipliers = Vec::with_capacity(n_steps + 1);
    let mut energy = Vec::with_capacity(n_steps + 1);
    let mut eps_history = Vec::with_capacity(n_steps + 1);

    let state_of = |coords: &DVector<f64>| q0.with_coords(coords.as_slice().to_vec());

    for step in 0..=n_steps {
        let qs = state_of(&q)?;
        let k1 = stage_rhs(kernels, cs, &qs, p.as_slice())?;
        positions.push(q.clone());
        momenta.push(p.clone());
        multipliers.push(k1.lambda.clone());
        energy.push(k1.energy);
        eps_history.push(k1.eps);
        if step == n_steps {
            break;
        }

        let eval = |dq: &DVector<f64>, dp: &DVector<f64>, scale: f64| -> Result<Stage> {
            let qq = state_of(&(&q + dq * scale))?;
            let pp = &p + dp * scale;
            stage_rhs(kernels, cs, &qq, pp.as_slice())
        };
        let k2 = eval(&k1.qdot, &k1.pdot, 0.5 * h)?;
        let k3 = eval(&k2.qdot, &k2.pdot, 0.5 * h)?;
        let k4 = eval(&k3.qdot, &k3.pdot, h)?;

        q += (&k1.qdot + &k2.qdot * 2.0 + &k3.qdot * 2.0 + &k4.qdot) * (h / 6.0);
        p += (&k1.pdot + &k2.pdot * 2.0 + &k3.pdot * 2.0 + &k4.pdot) * (h / 6.0);
        check_magnitude(&q, step, threshold)?;
        check_magnitude(&p, step, f64::INFINITY)?;
    }

    Ok(Trajectory {
        base: q0.clone(),
        times: (0..=n_steps).map(|i| i as f64 * h).collect(),
        positions,
        momenta: Some(momenta),
        controls: None,
        multipliers,
        energy,
        eps_history,
        integrator: "rk4",
    })
}

/// Integrates the controlled flow `qdot = K_q u_i` with the piecewise
/// constant per-step controls, recording `u^T K_q u / 2` at each node (the
/// final node reuses the last step's control).
pub fn flow_controlled(
    kernels: &GroupKernels,
    q0: &LandmarkState,
    controls: &[DVector<f64>],
) -> Result<Trajectory> {
    let n_steps = controls.len();
    if n_steps == 0 {
        return Err(Error::InvalidInput(
            "controlled flow needs at least one step".to_string(),
        ));
    }
    kernels.check_state(q0)?;
    for u in controls {
        if u.len() != q0.nd() {
            return Err(Error::ShapeMismatch(format!(
                "control length {} does not match state size {}",
                u.len(),
                q0.nd()
            )));
        }
    }
    let threshold = 1e8 * (1.0 + q0.max_abs());
    let h = 1.0 / n_steps as f64;
    let state_of = |coords: &DVector<f64>| q0.with_coords(coords.as_slice().to_vec());

    let mut q = DVector::from_column_slice(q0.coords());
    let mut positions = Vec::with_capacity(n_steps + 1);
    let mut energy = Vec::with_capacity(n_steps + 1);
    for (step, u) in controls.iter().enumerate() {
        let qs = state_of(&q)?;
        positions.push(q.clone());
        energy.push(0.5 * dot(u.as_slice(), kernels.apply(&qs, u.as_slice()).as_slice()));

        let k1 = kernels.apply(&qs, u.as_slice());
        let k2 = kernels.apply(&state_of(&(&q + &k1 * (0.5 * h)))?, u.as_slice());
        let k3 = kernels.apply(&state_of(&(&q + &k2 * (0.5 * h)))?, u.as_slice());
        let k4 = kernels.apply(&state_of(&(&q + &k3 * h))?, u.as_slice());
        q += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        check_magnitude(&q, step, threshold)?;
    }
    let last = controls.last().expect("nonempty controls");
    let qs = state_of(&q)?;
    positions.push(q.clone());
    energy.push(
        0.5 * dot(
            last.as_slice(),
            kernels.apply(&qs, last.as_slice()).as_slice(),
        ),
    );

    Ok(Trajectory {
        base: q0.clone(),
        times: (0..=n_steps).map(|i| i as f64 * h).collect(),
        positions,
        momenta: None,
        controls: Some(controls.to_vec()),
        multipliers: vec![DVector::zeros(0); n_steps + 1],
        energy: energy.clone(),
        eps_history: vec![0.0; n_steps + 1],
        integrator: "rk4",
    })
}

/// Linear interpolation of stored nodes at an arbitrary time.
fn interp(nodes: &[DVector<f64>], n_steps: usize, t: f64) -> DVector<f64> {
    let s = (t * n_steps as f64).clamp(0.0, n_steps as f64);
    let i = (s.floor() as usize).min(n_steps - 1);
    let frac = s - i as f64;
    &nodes[i] * (1.0 - frac) + &nodes[i + 1] * frac
}

/// Integrates the transposed variational system of the geodesic flow
/// backward from `(z, alpha)(t=1) = (zT, 0)`, returning the adjoint pair at
/// `t = 0`. The shooting gradient is then `K_{q0} (pi p0) + alpha`.
pub fn backward_sweep(
    kernels: &GroupKernels,
    cs: &ConstraintSet,
    traj: &Trajectory,
    z_terminal: &[f64],
) -> Result<BackwardState> {
    let momenta = traj.momenta.as_ref().ok_or_else(|| {
        Error::InvalidInput("backward sweep needs a momentum-carrying trajectory".to_string())
    })?;
    let n_steps = traj.n_steps();
    let h = 1.0 / n_steps as f64;
    let nd = traj.base.nd();
    if z_terminal.len() != nd {
        return Err(Error::ShapeMismatch(format!(
            "terminal adjoint length {} does not match state size {}",
            z_terminal.len(),
            nd
        )));
    }

    let mut z = DVector::from_column_slice(z_terminal);
    let mut alpha = DVector::zeros(nd);

    // d/ds (z, alpha) at reversed time s (forward time t = 1 - s).
    let rhs =
        |s: f64, z: &DVector<f64>, alpha: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
            let t = 1.0 - s;
            let qv = interp(&traj.positions, n_steps, t);
            let pv = interp(momenta, n_steps, t);
            let qs = traj.base.with_coords(qv.as_slice().to_vec())?;
            if cs.is_empty() {
                let zdot = kernels.grad_quadratic(&qs, pv.as_slice(), z.as_slice())
                    - kernels.hess_quadratic_action(&qs, pv.as_slice(), alpha.as_slice()) * 0.5;
                let adot = kernels.apply(&qs, z.as_slice())
                    - kernels.dir_deriv(&qs, pv.as_slice(), alpha.as_slice());
                Ok((zdot, adot))
            } else {
                // Transpose of the variational matrix applied through the
                // Hamiltonian: V^T X = -Hess(h) J X, realized by a central
                // difference of the analytic flow gradient (the multipliers are
                // re-solved at the perturbed states).
                let dir_q = alpha.clone();
                let dir_p = z * -1.0;
                let scale = dir_q.amax().max(dir_p.amax());
                if scale == 0.0 {
                    return Ok((DVector::zeros(nd), DVector::zeros(nd)));
                }
                let eps = 1e-5 * (1.0 + qv.amax().max(pv.amax()));
                let grad_h = |sgn: f64| -> Result<(DVector<f64>, DVector<f64>)> {
                    let qq = &qv + &dir_q * (sgn * eps / scale);
                    let pp = &pv + &dir_p * (sgn * eps / scale);
                    let st = traj.base.with_coords(qq.as_slice().to_vec())?;
                    let stage = stage_rhs(kernels, cs, &st, pp.as_slice())?;
                    // grad_q h = -pdot, grad_p h = qdot.
                    Ok((stage.pdot * -1.0, stage.qdot))
                };
                let (gq_plus, gp_plus) = grad_h(1.0)?;
                let (gq_minus, gp_minus) = grad_h(-1.0)?;
                let fac = -scale / (2.0 * eps);
                Ok(((gq_plus - gq_minus) * fac, (gp_plus - gp_minus) * fac))
            }
        };

    for step in 0..n_steps {
        let s = step as f64 * h;
        let (k1z, k1a) = rhs(s, &z, &alpha)?;
        let (k2z, k2a) = rhs(
            s + 0.5 * h,
            &(&z + &k1z * (0.5 * h)),
            &(&alpha + &k1a * (0.5 * h)),
        )?;
        let (k3z, k3a) = rhs(
            s + 0.5 * h,
            &(&z + &k2z * (0.5 * h)),
            &(&alpha + &k2a * (0.5 * h)),
        )?;
        let (k4z, k4a) = rhs(s + h, &(&z + &k3z * h), &(&alpha + &k3a * h))?;
        z += (k1z + k2z * 2.0 + k3z * 2.0 + k4z) * (h / 6.0);
        alpha += (k1a + k2a * 2.0 + k3a * 2.0 + k4a) * (h / 6.0);
        check_magnitude(&z, step, f64::INFINITY)?;
        check_magnitude(&alpha, step, f64::INFINITY)?;
    }
    Ok(BackwardState { z, alpha })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{sliding_constraint, volume_constraint, ConstraintSet};
    use crate::kernels::KernelSpec;
    use crate::shapes::{circle_shape, polygon_volume, Group};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn uniform_gauss(q: &LandmarkState, sigma: f64) -> GroupKernels {
        GroupKernels::uniform(KernelSpec::gaussian(sigma).unwrap(), q)
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LandmarkState {
        let coords: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        LandmarkState::single(d, coords).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    #[test]
    fn zero_momentum_stays_put() {
        let q0 = circle_shape(6, [0.0, 0.0], 1.0).unwrap();
        let kernels = uniform_gauss(&q0, 1.0);
        let traj = integrate_geodesic(
            &kernels,
            &ConstraintSet::empty(),
            &q0,
            &vec![0.0; q0.nd()],
            20,
        )
        .unwrap();
        for pos in &traj.positions {
            assert_eq!(pos.as_slice(), q0.coords());
        }
        assert_eq!(traj.energy[0], 0.0);
    }

    #[test]
    fn single_landmark_travels_straight() {
        let q0 = LandmarkState::single(2, vec![0.25, -0.5]).unwrap();
        let kernels = uniform_gauss(&q0, 0.7);
        let cs = ConstraintSet::empty();
        let (qdot, pdot) = geodesic_rhs(&kernels, &cs, &q0, &[1.0, 0.0]).unwrap();
        assert_eq!(qdot.as_slice(), &[1.0, 0.0]);
        assert_eq!(pdot.as_slice(), &[0.0, 0.0]);

        let traj = integrate_geodesic(&kernels, &cs, &q0, &[1.0, 0.0], 10).unwrap();
        let end = traj.final_state();
        assert_abs_diff_eq!(end.coords()[0], 1.25, epsilon = 1e-14);
        assert_abs_diff_eq!(end.coords()[1], -0.5, epsilon = 1e-14);
    }

    #[test]
    fn single_landmark_hamiltonian_value() {
        let q0 = LandmarkState::single(2, vec![0.0, 0.0]).unwrap();
        let kernels = uniform_gauss(&q0, 1.0);
        let h = reduced_hamiltonian(&kernels, &ConstraintSet::empty(), &q0, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(h, 0.5);
    }

    #[test]
    fn rhs_matches_hamiltonian_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // Unconstrained random instance, then volume-constrained circle.
        let cases: Vec<(LandmarkState, GroupKernels, ConstraintSet)> = vec![
            (
                random_state(&mut rng, 5, 2),
                GroupKernels::uniform(
                    KernelSpec::cubic(0.8).unwrap(),
                    &random_state(&mut rng, 1, 2),
                ),
                ConstraintSet::empty(),
            ),
            (
                circle_shape(6, [0.0, 0.0], 1.0).unwrap(),
                GroupKernels::uniform(
                    KernelSpec::gaussian(0.9).unwrap(),
                    &circle_shape(6, [0.0, 0.0], 1.0).unwrap(),
                ),
                ConstraintSet::new(vec![Box::new(volume_constraint(0))]),
            ),
        ];
        for (q, kernels, cs) in cases {
            let p = random_vec(&mut rng, q.nd(), 0.8);
            let (qdot, pdot) = geodesic_rhs(&kernels, &cs, &q, &p).unwrap();
            let h = 1e-6;
            for i in 0..q.nd() {
                // dq/dt = dh/dp.
                let mut up = p.clone();
                let mut down = p.clone();
                up[i] += h;
                down[i] -= h;
                let fu = reduced_hamiltonian(&kernels, &cs, &q, &up).unwrap();
                let fd = reduced_hamiltonian(&kernels, &cs, &q, &down).unwrap();
                assert_abs_diff_eq!(qdot[i], (fu - fd) / (2.0 * h), epsilon = 2e-6);

                // dp/dt = -dh/dq (multipliers re-solved at perturbed states).
                let mut cu = q.coords().to_vec();
                let mut cd = q.coords().to_vec();
                cu[i] += h;
                cd[i] -= h;
                let fu =
                    reduced_hamiltonian(&kernels, &cs, &q.with_coords(cu).unwrap(), &p).unwrap();
                let fd =
                    reduced_hamiltonian(&kernels, &cs, &q.with_coords(cd).unwrap(), &p).unwrap();
                assert_abs_diff_eq!(pdot[i], -(fu - fd) / (2.0 * h), epsilon = 2e-6);
            }
        }
    }

    #[test]
    fn constrained_hamiltonian_not_above_unconstrained() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let q = circle_shape(8, [0.0, 0.0], 1.0).unwrap();
        let kernels = uniform_gauss(&q, 1.1);
        let cs = ConstraintSet::new(vec![Box::new(volume_constraint(0))]);
        for _ in 0..10 {
            let p = random_vec(&mut rng, q.nd(), 1.0);
            let free = reduced_hamiltonian(&kernels, &ConstraintSet::empty(), &q, &p).unwrap();
            let constrained = reduced_hamiltonian(&kernels, &cs, &q, &p).unwrap();
            assert!(constrained <= free + 1e-12 * free.abs());
        }
    }

    #[test]
    fn energy_is_conserved_and_drift_shrinks_with_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let q0 = random_state(&mut rng, 10, 2);
        let kernels = uniform_gauss(&q0, 1.0);
        let cs = ConstraintSet::empty();
        let p0 = random_vec(&mut rng, q0.nd(), 0.5);
        let coarse = integrate_geodesic(&kernels, &cs, &q0, &p0, 100).unwrap();
        let h0 = coarse.energy[0];
        let drift = |t: &Trajectory| {
            t.energy
                .iter()
                .map(|e| (e - h0).abs() / h0.abs())
                .fold(0.0, f64::max)
        };
        let coarse_drift = drift(&coarse);
        assert!(coarse_drift < 1e-8, "drift {}", coarse_drift);
        let fine = integrate_geodesic(&kernels, &cs, &q0, &p0, 200).unwrap();
        let ratio = coarse_drift / drift(&fine).max(f64::MIN_POSITIVE);
        assert!(ratio > 8.0, "only {}x reduction from halving", ratio);
    }

    #[test]
    fn constrained_flow_preserves_energy_volume_and_feasibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let q0 = circle_shape(8, [0.0, 0.0], 1.0).unwrap();
        let kernels = uniform_gauss(&q0, 1.0);
        let cs = ConstraintSet::new(vec![Box::new(volume_constraint(0))]);
        let p0 = random_vec(&mut rng, q0.nd(), 0.6);
        let traj = integrate_geodesic(&kernels, &cs, &q0, &p0, 100).unwrap();

        assert!(traj.energy_drift() < 1e-6, "drift {}", traj.energy_drift());

        let vol0 = polygon_volume(&q0, 0).unwrap();
        for i in 0..=traj.n_steps() {
            let qs = traj.state_at(i);
            let vol = polygon_volume(&qs, 0).unwrap();
            assert!(
                ((vol - vol0) / vol0).abs() < 1e-6,
                "volume drift {} at node {}",
                ((vol - vol0) / vol0).abs(),
                i
            );
            let p = traj.momenta.as_ref().unwrap()[i].clone();
            let solve = cs.solve_lambda(&kernels, &qs, p.as_slice(), None).unwrap();
            let feas = cs.value(&kernels, &qs, solve.projected.as_slice()).unwrap();
            let base = cs.value(&kernels, &qs, p.as_slice()).unwrap();
            assert!(feas.norm() <= 1e-8 * (1.0 + base.norm()));
        }
    }

    #[test]
    fn total_momentum_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let q0 = random_state(&mut rng, 6, 2);
        let kernels = uniform_gauss(&q0, 0.8);
        let p0 = random_vec(&mut rng, q0.nd(), 0.5);
        let traj = integrate_geodesic(&kernels, &ConstraintSet::empty(), &q0, &p0, 100).unwrap();
        let momenta = traj.momenta.as_ref().unwrap();
        for c in 0..2 {
            let total0: f64 = (0..q0.n()).map(|i| momenta[0][2 * i + c]).sum();
            for p in momenta {
                let total: f64 = (0..q0.n()).map(|i| p[2 * i + c]).sum();
                assert!(
                    (total - total0).abs() <= 1e-8 * (1.0 + total0.abs()),
                    "momentum drift {}",
                    (total - total0).abs()
                );
            }
        }
    }

    #[test]
    fn flow_reverses_under_momentum_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(139);
        let q0 = random_state(&mut rng, 5, 2);
        let kernels = uniform_gauss(&q0, 1.0);
        let cs = ConstraintSet::empty();
        let p0 = random_vec(&mut rng, q0.nd(), 0.6);
        let fwd = integrate_geodesic(&kernels, &cs, &q0, &p0, 200).unwrap();
        let q1 = fwd.final_state();
        let p1: Vec<f64> = fwd.momenta.as_ref().unwrap()[200]
            .iter()
            .map(|v| -v)
            .collect();
        let back = integrate_geodesic(&kernels, &cs, &q1, &p1, 200).unwrap();
        let returned = back.final_state();
        let scale = q0.max_abs().max(1.0);
        for (a, b) in returned.coords().iter().zip(q0.coords()) {
            assert!(
                (a - b).abs() < 1e-6 * scale,
                "reversal error {}",
                (a - b).abs()
            );
        }
    }

    #[test]
    fn controlled_flow_basics() {
        let q0 = LandmarkState::single(2, vec![0.0, 0.0]).unwrap();
        let kernels = uniform_gauss(&q0, 1.0);
        // Zero control: nothing moves.
        let traj = flow_controlled(&kernels, &q0, &vec![DVector::zeros(2); 5]).unwrap();
        for pos in &traj.positions {
            assert_eq!(pos.as_slice(), q0.coords());
        }
        // Constant control on a single landmark: straight line at velocity u.
        let u = DVector::from_column_slice(&[0.5, -0.25]);
        let traj = flow_controlled(&kernels, &q0, &vec![u; 4]).unwrap();
        let end = traj.final_state();
        assert_abs_diff_eq!(end.coords()[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(end.coords()[1], -0.25, epsilon = 1e-14);
    }

    #[test]
    fn controlled_flow_energy_recomputes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let q0 = random_state(&mut rng, 4, 2);
        let kernels = uniform_gauss(&q0, 0.9);
        let controls: Vec<DVector<f64>> = (0..6)
            .map(|_| DVector::from_vec(random_vec(&mut rng, q0.nd(), 0.7)))
            .collect();
        let traj = flow_controlled(&kernels, &q0, &controls).unwrap();
        for i in 0..=traj.n_steps() {
            let qs = traj.state_at(i);
            let u = traj.control_at_node(i).unwrap();
            let recomputed = 0.5 * dot(u.as_slice(), kernels.apply(&qs, u.as_slice()).as_slice());
            assert_eq!(traj.energy[i], recomputed);
        }
    }

    #[test]
    fn backward_sweep_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let q0 = random_state(&mut rng, 4, 2);
        let kernels = uniform_gauss(&q0, 1.0);
        let cs = ConstraintSet::empty();
        let p0 = random_vec(&mut rng, q0.nd(), 0.5);
        let traj = integrate_geodesic(&kernels, &cs, &q0, &p0, 50).unwrap();

        // Zero terminal adjoint stays zero.
        let bs = backward_sweep(&kernels, &cs, &traj, &vec![0.0; q0.nd()]).unwrap();
        assert_eq!(bs.z.amax(), 0.0);
        assert_eq!(bs.alpha.amax(), 0.0);

        // Linearity in the terminal condition.
        let zt = random_vec(&mut rng, q0.nd(), 1.0);
        let twice: Vec<f64> = zt.iter().map(|v| 2.0 * v).collect();
        let a = backward_sweep(&kernels, &cs, &traj, &zt).unwrap();
        let b = backward_sweep(&kernels, &cs, &traj, &twice).unwrap();
        assert!((b.alpha - &a.alpha * 2.0).amax() < 1e-12 * (1.0 + a.alpha.amax()));
        assert!((b.z - &a.z * 2.0).amax() < 1e-12 * (1.0 + a.z.amax()));
    }

    #[test]
    fn backward_sweep_single_landmark_closed_form() {
        let q0 = LandmarkState::single(2, vec![0.1, 0.4]).unwrap();
        let kernels = uniform_gauss(&q0, 1.0);
        let cs = ConstraintSet::empty();
        let traj = integrate_geodesic(&kernels, &cs, &q0, &[0.7, -0.2], 20).unwrap();
        let zt = [1.5, -2.5];
        let bs = backward_sweep(&kernels, &cs, &traj, &zt).unwrap();
        // A single landmark translates; the variational system reduces to
        // z' = 0, alpha' = z, so alpha(0-adjoint) = zT.
        assert_abs_diff_eq!(bs.alpha[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(bs.alpha[1], -2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(bs.z[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn blow_up_is_detected() {
        let q0 = LandmarkState::single(2, vec![0.0, 0.0, 0.5, 0.0]).unwrap();
        let kernels = uniform_gauss(&q0, 1.0);
        let err = integrate_geodesic(
            &kernels,
            &ConstraintSet::empty(),
            &q0,
            &[1e12, 0.0, 1e12, 0.0],
            10,
        )
        .unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn stitched_pairs_stay_glued_along_the_flow() {
        // Two copies of the same three points under different kernels,
        // stitched pointwise: equal stage velocities must keep the copies
        // coincident to roundoff for the whole flow.
        let base = vec![0.0, 0.0, 1.0, 0.1, 0.4, 0.9];
        let mut coords = base.clone();
        coords.extend_from_slice(&base);
        let q0 = LandmarkState::with_groups(
            2,
            coords,
            vec![
                Group {
                    name: "inner".into(),
                    indices: vec![0, 1, 2],
                },
                Group {
                    name: "copy".into(),
                    indices: vec![3, 4, 5],
                },
            ],
        )
        .unwrap();
        let kernels = GroupKernels::new(vec![
            KernelSpec::cubic(1.0).unwrap(),
            KernelSpec::cubic(0.1).unwrap(),
        ]);
        let cs = ConstraintSet::new(vec![Box::new(crate::constraints::stitched_constraint(
            vec![(0, 3), (1, 4), (2, 5)],
        ))]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p0 = random_vec(&mut rng, q0.nd(), 0.8);
        let traj = integrate_geodesic(&kernels, &cs, &q0, &p0, 40).unwrap();
        for pos in &traj.positions {
            for pair in 0..3 {
                for c in 0..2 {
                    let a = pos[pair * 2 + c];
                    let b = pos[(pair + 3) * 2 + c];
                    assert_abs_diff_eq!(a, b, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn cross_group_rows_are_rejected_by_the_integrator() {
        let q = LandmarkState::with_groups(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            vec![
                Group {
                    name: "shape".into(),
                    indices: vec![0, 1],
                },
                Group {
                    name: "back".into(),
                    indices: vec![2, 3],
                },
            ],
        )
        .unwrap();
        let kernels = GroupKernels::new(vec![
            KernelSpec::gaussian(1.0).unwrap(),
            KernelSpec::gaussian(0.5).unwrap(),
        ]);
        let cs = ConstraintSet::new(vec![Box::new(sliding_constraint(0, 1, vec![(2, 3)]))]);
        let err = integrate_geodesic(&kernels, &cs, &q, &vec![0.1; q.nd()], 5).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
