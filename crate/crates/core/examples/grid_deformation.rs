//! Visualization artifacts: solve a small match, advect an ambient grid
//! through the optimal flow, and write the text artifacts a plotting script
//! would consume.
//!
//! Run with:
//!   cargo run --example grid_deformation

use shapeflow::constraints::ConstraintSet;
use shapeflow::io;
use shapeflow::kernels::{GroupKernels, KernelSpec};
use shapeflow::optim::{minimize_shooting, SolverOptions};
use shapeflow::shapes::{circle_shape, MatchProblem};

fn main() {
    let q0 = circle_shape(12, [0.0, 0.0], 0.8).unwrap();
    let target = circle_shape(12, [0.9, 0.3], 0.8).unwrap();
    let kernels = GroupKernels::uniform(KernelSpec::gaussian(1.0).unwrap(), &q0);
    let problem =
        MatchProblem::new(kernels, q0.clone(), target, 4.0, ConstraintSet::empty()).unwrap();

    let options = SolverOptions {
        max_inner_iters: 100,
        ..Default::default()
    };
    let solution = minimize_shooting(&problem, 30, &options).unwrap();
    println!("objective {:.5}", solution.report.objective);

    // The grid sees the same stage velocity fields that moved the landmarks.
    let bbox = io::bounding_box(&[&q0, &problem.target], 0.6).unwrap();
    let grid = io::deform_grid(
        &solution.trajectory,
        &problem.kernels,
        &problem.constraints,
        bbox,
        11,
    )
    .unwrap();

    let mut largest = (0.0f64, [0.0; 2], [0.0; 2]);
    let mut moved = 0;
    for (a, b) in grid.start.iter().zip(&grid.end) {
        let d = (a[0] - b[0]).hypot(a[1] - b[1]);
        if d > 1e-3 {
            moved += 1;
        }
        if d > largest.0 {
            largest = (d, *a, *b);
        }
    }
    println!(
        "{} of {} grid nodes moved more than 1e-3",
        moved,
        grid.start.len()
    );
    println!(
        "largest displacement {:.3}: ({:+.2}, {:+.2}) to ({:+.2}, {:+.2})",
        largest.0, largest.1[0], largest.1[1], largest.2[0], largest.2[1]
    );

    let dir = std::env::temp_dir().join("shapeflow-grid-example");
    std::fs::create_dir_all(&dir).unwrap();
    io::write_trajectory(&dir.join("trajectory.txt"), &solution.trajectory).unwrap();
    io::write_grid(&dir.join("grid.txt"), &grid).unwrap();
    io::write_shape(&dir.join("final.txt"), &solution.trajectory.final_state()).unwrap();
    println!("artifacts in {}", dir.display());
}
