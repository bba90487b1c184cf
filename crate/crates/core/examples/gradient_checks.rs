//! Central finite differences against the two analytic gradients: the
//! shooting gradient in the initial momentum and the augmented Lagrangian
//! gradient in the per-step controls.
//!
//! Run with:
//!   cargo run --example gradient_checks

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use shapeflow::constraints::{volume_constraint, ConstraintSet};
use shapeflow::kernels::{GroupKernels, KernelSpec};
use shapeflow::optim::{al_gradient, shooting_gradient, shooting_objective};
use shapeflow::shapes::{circle_shape, MatchProblem};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let q0 = circle_shape(5, [0.0, 0.0], 1.0).unwrap();
    let target = circle_shape(5, [0.5, -0.2], 0.9).unwrap();
    let kernels = GroupKernels::uniform(KernelSpec::gaussian(1.0).unwrap(), &q0);
    let cs = ConstraintSet::new(vec![Box::new(volume_constraint(0))]);
    let problem = MatchProblem::new(kernels, q0, target, 2.0, cs).unwrap();
    let nd = problem.q0.nd();
    let h = 1e-5;

    // Shooting: d objective / d p0 from the backward variational sweep.
    let n_steps = 120;
    let p0: Vec<f64> = (0..nd).map(|_| rng.gen_range(-0.4..0.4)).collect();
    let (value, grad, _) = shooting_gradient(&problem, &p0, n_steps).unwrap();
    println!("shooting objective {:.6} at a random p0", value);
    let mut worst = 0.0f64;
    for j in 0..nd {
        let mut up = p0.clone();
        let mut down = p0.clone();
        up[j] += h;
        down[j] -= h;
        let (vu, _) = shooting_objective(&problem, &up, n_steps).unwrap();
        let (vd, _) = shooting_objective(&problem, &down, n_steps).unwrap();
        let fd = (vu - vd) / (2.0 * h);
        let err = (grad[j] - fd).abs() / (1.0 + fd.abs());
        worst = worst.max(err);
        if j < 4 {
            println!("  coord {}: adjoint {:+.8} fd {:+.8}", j, grad[j], fd);
        }
    }
    println!("  worst relative error over {} coords: {:.2e}", nd, worst);

    // Augmented Lagrangian: d value / d u at fixed multipliers and penalty.
    let al_steps = 30;
    let k = problem.constraints.rows(&problem.q0).unwrap();
    let controls: Vec<DVector<f64>> = (0..al_steps)
        .map(|_| DVector::from_iterator(nd, (0..nd).map(|_| rng.gen_range(-0.3..0.3))))
        .collect();
    let lam: Vec<DVector<f64>> = (0..al_steps)
        .map(|_| DVector::from_iterator(k, (0..k).map(|_| rng.gen_range(-0.5..0.5))))
        .collect();
    let mu = 0.7;
    let grad = al_gradient(&problem, &controls, &lam, mu).unwrap();
    println!(
        "augmented Lagrangian value {:.6} at random controls",
        grad.value
    );
    let dt = 1.0 / al_steps as f64;
    let mut worst = 0.0f64;
    for probe in (0..al_steps * nd).step_by(17) {
        let (i, j) = (probe / nd, probe % nd);
        let mut up = controls.clone();
        let mut down = controls.clone();
        up[i][j] += h;
        down[i][j] -= h;
        let vu = al_gradient(&problem, &up, &lam, mu).unwrap().value;
        let vd = al_gradient(&problem, &down, &lam, mu).unwrap().value;
        let fd = (vu - vd) / (2.0 * h);
        let analytic = dt * grad.flat_grads[i][j];
        worst = worst.max((analytic - fd).abs() / (1.0 + fd.abs()));
    }
    println!("  worst relative error over probed controls: {:.2e}", worst);
}
