//! Landmark matching by geodesic shooting: optimize the initial momentum so
//! the flow carries a circle onto a shifted copy.
//!
//! Run with:
//!   cargo run --example unconstrained_matching

use shapeflow::constraints::ConstraintSet;
use shapeflow::kernels::{GroupKernels, KernelSpec};
use shapeflow::optim::{minimize_shooting, SolverOptions};
use shapeflow::shapes::{circle_shape, MatchProblem};

fn main() {
    let q0 = circle_shape(16, [0.0, 0.0], 1.0).unwrap();
    let target = circle_shape(16, [0.8, 0.2], 1.0).unwrap();
    let kernels = GroupKernels::uniform(KernelSpec::gaussian(1.0).unwrap(), &q0);
    let problem = MatchProblem::new(kernels, q0, target, 8.0, ConstraintSet::empty()).unwrap();

    let options = SolverOptions {
        max_inner_iters: 150,
        grad_tol: 1e-4,
        ..Default::default()
    };
    let solution = minimize_shooting(&problem, 40, &options).unwrap();
    let report = &solution.report;

    println!("termination:     {:?}", report.termination);
    println!("iterations:      {}", report.inner_iterations);
    println!("objective:       {:.6}", report.objective);
    println!("  kinetic:       {:.6}", report.kinetic_energy);
    println!("  attachment:    {:.6}", report.attachment);
    println!("gradient norm:   {:.3e}", report.grad_norm);

    // How close did the flow land?
    let final_state = solution.trajectory.final_state();
    let worst = (0..final_state.n())
        .map(|i| {
            let a = final_state.point(i);
            let b = problem.target.point(i);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max);
    println!("worst landmark miss: {:.4}", worst);
}
