//! Constant-volume matching: the unconstrained flow squeezes the disc while
//! it travels; a volume row keeps the enclosed area fixed to roundoff.
//!
//! Run with:
//!   cargo run --example volume_constrained_matching

use shapeflow::constraints::{volume_constraint, ConstraintSet};
use shapeflow::kernels::{GroupKernels, KernelSpec};
use shapeflow::optim::{minimize_shooting, Solution, SolverOptions};
use shapeflow::shapes::{circle_shape, polygon_volume, MatchProblem};

fn volume_range(solution: &Solution) -> (f64, f64) {
    let traj = &solution.trajectory;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..=traj.n_steps() {
        let v = polygon_volume(&traj.state_at(i), 0).unwrap();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn main() {
    let q0 = circle_shape(20, [0.0, 0.0], 1.0).unwrap();
    let target = circle_shape(20, [1.3, 0.0], 1.0).unwrap();
    let vol0 = polygon_volume(&q0, 0).unwrap();
    let options = SolverOptions {
        max_inner_iters: 150,
        grad_tol: 1e-5,
        ..Default::default()
    };

    let solve = |constrained: bool| -> Solution {
        let kernels = GroupKernels::uniform(KernelSpec::gaussian(1.0).unwrap(), &q0);
        let cs = if constrained {
            ConstraintSet::new(vec![Box::new(volume_constraint(0))])
        } else {
            ConstraintSet::empty()
        };
        let problem = MatchProblem::new(kernels, q0.clone(), target.clone(), 10.0, cs).unwrap();
        minimize_shooting(&problem, 50, &options).unwrap()
    };

    println!("initial volume: {:.4}", vol0);

    let free = solve(false);
    let (lo, hi) = volume_range(&free);
    println!("unconstrained:");
    println!("  attachment:     {:.5}", free.report.attachment);
    println!("  volume range:   [{:.4}, {:.4}]", lo, hi);
    println!("  max shrinkage:  {:.1}%", 100.0 * (vol0 - lo) / vol0);

    let pinned = solve(true);
    let (lo, hi) = volume_range(&pinned);
    println!("volume-constrained:");
    println!("  attachment:     {:.5}", pinned.report.attachment);
    println!("  volume range:   [{:.4}, {:.4}]", lo, hi);
    println!(
        "  relative drift: {:.2e}",
        ((hi - vol0).abs().max((lo - vol0).abs())) / vol0
    );
}
