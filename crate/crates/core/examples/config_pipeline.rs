//! Config-file pipeline: the built-in experiment configs round-trip through
//! JSON, build into problems, and solve exactly like hand-written ones. The
//! `shapeflow` binary drives the same path from the command line.
//!
//! Run with:
//!   cargo run --example config_pipeline

use shapeflow::cli::builtin_config;
use shapeflow::io;

fn main() {
    let dir = std::env::temp_dir().join("shapeflow-config-example");
    std::fs::create_dir_all(&dir).unwrap();

    for name in ["volume-circle", "multishape-stitched", "multishape-sliding"] {
        let config = builtin_config(name).unwrap();
        let path = dir.join(format!("{}.json", name));
        io::write_config(&path, &config).unwrap();
        let back = io::read_config(&path).unwrap();
        let problem = io::build_problem(&back, &dir).unwrap();
        let rows = problem.constraints.rows(&problem.q0).unwrap();
        println!(
            "{}: {} groups, {} landmarks, {} constraint rows, solver {:?}",
            name,
            problem.q0.groups().len(),
            problem.q0.n(),
            rows,
            back.solver,
        );
    }
    println!("configs written to {}", dir.display());

    // Solve a trimmed copy of the volume experiment right here; the full
    // sizes are the binary's job (`shapeflow run <config> --out <dir>`).
    let mut config = builtin_config("volume-circle").unwrap();
    config.steps = 30;
    config.options.max_inner_iters = 80;
    let problem = io::build_problem(&config, &dir).unwrap();
    let solution = shapeflow::cli::solve(&config, &problem).unwrap();
    println!(
        "trimmed volume-circle: objective {:.5}, attachment {:.5}, volume residual {:.1e}",
        solution.report.objective, solution.report.attachment, solution.report.constraint_violation,
    );
}
