// End-to-end gates for the solver stack. Each test prints one scoreboard
// line (visible under `cargo test --test acceptance -- --show-output`) and
// asserts the same condition, so a failure is both loud and greppable.
//
// Tolerances and runtime budgets are pinned here on purpose; loosening them
// is a behavior change, not a test fix.

use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use shapeflow::cli::{self, builtin_config};
use shapeflow::constraints::{
    fixed_direction_constraint, sliding_constraint, stitched_constraint, volume_constraint,
    ConstraintSet,
};
use shapeflow::geodesics::integrate_geodesic;
use shapeflow::io;
use shapeflow::kernels::{GroupKernels, KernelSpec};
use shapeflow::optim::{
    al_gradient, brute_force_oracle, minimize_augmented_lagrangian, minimize_shooting,
    shooting_gradient, shooting_objective, SolverOptions,
};
use shapeflow::shapes::{polygon_volume, Group, LandmarkState, MatchProblem};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {}: {} ({})",
        criterion,
        if pass { "pass" } else { "FAIL" },
        detail
    );
    assert!(pass, "acceptance {} failed: {}", criterion, detail);
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> LandmarkState {
    let coords: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-spread..spread)).collect();
    LandmarkState::single(2, coords).unwrap()
}

fn random_momentum(rng: &mut ChaCha8Rng, nd: usize, scale: f64) -> Vec<f64> {
    (0..nd).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Circle with radial jitter; stays a simple polygon for any jitter < radius.
fn jittered_circle(rng: &mut ChaCha8Rng, n: usize, radius: f64, jitter: f64) -> Vec<f64> {
    let mut coords = Vec::with_capacity(2 * n);
    for i in 0..n {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let r = radius + rng.gen_range(-jitter..jitter);
        coords.push(r * theta.cos());
        coords.push(r * theta.sin());
    }
    coords
}

// -------------------------------------------------------------------------
// 1. The flow conserves the reduced Hamiltonian at RK4 order.
// -------------------------------------------------------------------------

#[test]
fn acceptance_1_energy_conservation() {
    const DRIFT_BOUND: f64 = 1e-6;
    const BUDGET_SECS: f64 = 5.0;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    let mut detail = String::new();
    let mut pass = true;
    for constrained in [false, true] {
        let (q0, cs) = if constrained {
            let q = LandmarkState::single(2, jittered_circle(&mut rng, 10, 1.0, 0.15)).unwrap();
            (q, ConstraintSet::new(vec![Box::new(volume_constraint(0))]))
        } else {
            (random_cloud(&mut rng, 10, 1.2), ConstraintSet::empty())
        };
        let kernels = GroupKernels::uniform(KernelSpec::gaussian(0.8).unwrap(), &q0);
        let p0 = random_momentum(&mut rng, q0.nd(), 1.5);

        let coarse = integrate_geodesic(&kernels, &cs, &q0, &p0, 100).unwrap();
        let fine = integrate_geodesic(&kernels, &cs, &q0, &p0, 200).unwrap();
        let (d100, d200) = (coarse.energy_drift(), fine.energy_drift());
        let ratio = d100 / d200.max(f64::MIN_POSITIVE);
        // RK4 is fourth order, so doubling the node count should shrink the
        // drift by about 16x; allow slack for roundoff in the fine run.
        pass &= d100 < DRIFT_BOUND && ratio > 8.0 && ratio < 40.0;
        detail.push_str(&format!(
            "{}: drift@100 {:.2e}, drift@200 {:.2e}, ratio {:.1}; ",
            if constrained { "volume" } else { "free" },
            d100,
            d200,
            ratio
        ));
    }

    let elapsed = start.elapsed().as_secs_f64();
    detail.push_str(&format!("{:.2}s of {}s", elapsed, BUDGET_SECS));
    report(
        "1 energy conservation",
        pass && elapsed < BUDGET_SECS,
        &detail,
    );
}

// -------------------------------------------------------------------------
// 2. Both solvers' analytic gradients match central finite differences.
// -------------------------------------------------------------------------

fn five_landmark_problem(rng: &mut ChaCha8Rng, constrained: bool) -> MatchProblem {
    let q0 = if constrained {
        LandmarkState::single(2, jittered_circle(rng, 5, 1.0, 0.1)).unwrap()
    } else {
        random_cloud(rng, 5, 1.0)
    };
    let shift: Vec<f64> = q0
        .coords()
        .iter()
        .enumerate()
        .map(|(i, c)| c + if i % 2 == 0 { 0.35 } else { -0.25 })
        .collect();
    let target = q0.with_coords(shift).unwrap();
    let kernels = GroupKernels::uniform(KernelSpec::gaussian(1.0).unwrap(), &q0);
    let cs = if constrained {
        ConstraintSet::new(vec![Box::new(volume_constraint(0))])
    } else {
        ConstraintSet::empty()
    };
    MatchProblem::new(kernels, q0, target, 2.0, cs).unwrap()
}

#[test]
fn acceptance_2_gradient_correctness() {
    const TOL_FREE: f64 = 1e-4;
    const TOL_CONSTRAINED: f64 = 1e-3;
    const BUDGET_SECS: f64 = 30.0;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    let mut detail = String::new();
    let mut pass = true;
    for constrained in [false, true] {
        let problem = five_landmark_problem(&mut rng, constrained);
        let nd = problem.q0.nd();
        let tol = if constrained {
            TOL_CONSTRAINED
        } else {
            TOL_FREE
        };

        // Shooting: objective gradient in the initial momentum.
        let n_steps = 200;
        let p0 = random_momentum(&mut rng, nd, 0.4);
        let (_, grad, _) = shooting_gradient(&problem, &p0, n_steps).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for j in 0..nd {
            let mut up = p0.clone();
            let mut down = p0.clone();
            up[j] += h;
            down[j] -= h;
            let (vu, _) = shooting_objective(&problem, &up, n_steps).unwrap();
            let (vd, _) = shooting_objective(&problem, &down, n_steps).unwrap();
            let fd = (vu - vd) / (2.0 * h);
            worst = worst.max((grad[j] - fd).abs());
            scale = scale.max(grad[j].abs()).max(fd.abs());
        }
        let shoot_err = worst / scale;
        pass &= shoot_err < tol;

        // Augmented Lagrangian: value gradient in the per-step controls at
        // fixed multipliers and penalty.
        let al_steps = 40;
        let k = problem.constraints.rows(&problem.q0).unwrap();
        let controls: Vec<DVector<f64>> = (0..al_steps)
            .map(|_| DVector::from_iterator(nd, (0..nd).map(|_| rng.gen_range(-0.3..0.3))))
            .collect();
        let lam: Vec<DVector<f64>> = (0..al_steps)
            .map(|_| DVector::from_iterator(k, (0..k).map(|_| rng.gen_range(-0.5..0.5))))
            .collect();
        let mu = 0.7;
        let grad = al_gradient(&problem, &controls, &lam, mu).unwrap();
        let dt = 1.0 / al_steps as f64;
        let total = al_steps * nd;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for probe in (0..total).step_by(7) {
            let (i, j) = (probe / nd, probe % nd);
            let mut up = controls.clone();
            let mut down = controls.clone();
            up[i][j] += h;
            down[i][j] -= h;
            let vu = al_gradient(&problem, &up, &lam, mu).unwrap().value;
            let vd = al_gradient(&problem, &down, &lam, mu).unwrap().value;
            let fd = (vu - vd) / (2.0 * h);
            let analytic = dt * grad.flat_grads[i][j];
            worst = worst.max((analytic - fd).abs());
            scale = scale.max(analytic.abs()).max(fd.abs());
        }
        let al_err = worst / scale;
        pass &= al_err < tol;

        detail.push_str(&format!(
            "{}: shooting {:.2e}, al {:.2e} (tol {:.0e}); ",
            if constrained { "volume" } else { "free" },
            shoot_err,
            al_err,
            tol
        ));
    }

    let elapsed = start.elapsed().as_secs_f64();
    detail.push_str(&format!("{:.2}s of {}s", elapsed, BUDGET_SECS));
    report(
        "2 gradient correctness",
        pass && elapsed < BUDGET_SECS,
        &detail,
    );
}

// -------------------------------------------------------------------------
// 3. Momentum projection: idempotent, energy reducing, feasible.
// -------------------------------------------------------------------------

struct ProjectionInstance {
    q: LandmarkState,
    cs: ConstraintSet,
}

fn projection_instance(kind: &str, rng: &mut ChaCha8Rng) -> ProjectionInstance {
    match kind {
        "volume" => {
            let q = LandmarkState::single(2, jittered_circle(rng, 6, 1.0, 0.2)).unwrap();
            ProjectionInstance {
                q,
                cs: ConstraintSet::new(vec![Box::new(volume_constraint(0))]),
            }
        }
        "fixed-direction" => {
            let q = random_cloud(rng, 5, 1.0);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            ProjectionInstance {
                q,
                cs: ConstraintSet::new(vec![Box::new(fixed_direction_constraint(
                    rng.gen_range(0..5),
                    vec![angle.cos(), angle.sin()],
                ))]),
            }
        }
        "stitched" => {
            let n = 4;
            let mut coords = Vec::new();
            for _ in 0..2 * n {
                coords.push(rng.gen_range(-1.0..1.0));
                coords.push(rng.gen_range(-1.0..1.0));
            }
            let groups = vec![
                Group {
                    name: "a".to_string(),
                    indices: (0..n).collect(),
                },
                Group {
                    name: "b".to_string(),
                    indices: (n..2 * n).collect(),
                },
            ];
            let q = LandmarkState::with_groups(2, coords, groups).unwrap();
            let pairs = (0..n).map(|i| (i, n + i)).collect();
            ProjectionInstance {
                q,
                cs: ConstraintSet::new(vec![Box::new(stitched_constraint(pairs))]),
            }
        }
        "sliding" => {
            let n = 6;
            let mut coords = jittered_circle(rng, n, 1.0, 0.1);
            coords.extend(jittered_circle(rng, n, 1.0, 0.1));
            let groups = vec![
                Group {
                    name: "shape".to_string(),
                    indices: (0..n).collect(),
                },
                Group {
                    name: "background".to_string(),
                    indices: (n..2 * n).collect(),
                },
            ];
            let q = LandmarkState::with_groups(2, coords, groups).unwrap();
            let segments = (0..n).map(|i| (n + i, n + (i + 1) % n)).collect();
            ProjectionInstance {
                q,
                cs: ConstraintSet::new(vec![Box::new(sliding_constraint(0, 1, segments))]),
            }
        }
        other => panic!("unknown instance kind {}", other),
    }
}

#[test]
fn acceptance_3_projection_algebra() {
    const IDEM_TOL: f64 = 1e-10;
    const FEAS_TOL: f64 = 1e-8;
    const INSTANCES: usize = 100;
    const BUDGET_SECS: f64 = 5.0;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    let mut detail = String::new();
    let mut pass = true;
    for kind in ["volume", "fixed-direction", "stitched", "sliding"] {
        let mut worst_idem = 0.0f64;
        let mut worst_energy = 0.0f64;
        let mut worst_feas = 0.0f64;
        for _ in 0..INSTANCES {
            let inst = projection_instance(kind, &mut rng);
            let kernels = GroupKernels::uniform(KernelSpec::gaussian(0.9).unwrap(), &inst.q);
            let p = random_momentum(&mut rng, inst.q.nd(), 1.0);

            let once = inst.cs.project_momentum(&kernels, &inst.q, &p).unwrap();
            let twice = inst
                .cs
                .project_momentum(&kernels, &inst.q, once.as_slice())
                .unwrap();
            worst_idem = worst_idem.max((&twice - &once).amax() / (1.0 + once.amax()));

            let e_raw = 0.5 * DVector::from_column_slice(&p).dot(&kernels.apply(&inst.q, &p));
            let e_proj = 0.5 * once.dot(&kernels.apply(&inst.q, once.as_slice()));
            worst_energy = worst_energy.max(e_proj - e_raw * (1.0 + 1e-12));

            let raw_res = inst.cs.value(&kernels, &inst.q, &p).unwrap().norm();
            let proj_res = inst
                .cs
                .value(&kernels, &inst.q, once.as_slice())
                .unwrap()
                .norm();
            worst_feas = worst_feas.max(proj_res / (1.0 + raw_res));
        }
        pass &= worst_idem < IDEM_TOL && worst_energy <= 0.0 && worst_feas < FEAS_TOL;
        detail.push_str(&format!(
            "{}: idem {:.1e}, feas {:.1e}; ",
            kind, worst_idem, worst_feas
        ));
    }

    let elapsed = start.elapsed().as_secs_f64();
    detail.push_str(&format!("{:.2}s of {}s", elapsed, BUDGET_SECS));
    report(
        "3 projection algebra",
        pass && elapsed < BUDGET_SECS,
        &detail,
    );
}

// -------------------------------------------------------------------------
// 4. Volume behavior of the built-in circle experiment.
// -------------------------------------------------------------------------

#[test]
fn acceptance_4_volume_preservation() {
    const SHRINK_FACTOR: f64 = 0.99;
    const DRIFT_BOUND: f64 = 1e-3;
    const ATTACHMENT_FACTOR: f64 = 0.05;
    const BUDGET_SECS: f64 = 60.0;
    let start = Instant::now();

    let config = builtin_config("volume-circle").unwrap();
    let constrained = io::build_problem(&config, std::path::Path::new(".")).unwrap();
    let vol0 = polygon_volume(&constrained.q0, 0).unwrap();

    // Without the volume row the matched disc transiently contracts.
    let mut free_config = config.clone();
    free_config.constraints.clear();
    let free = io::build_problem(&free_config, std::path::Path::new(".")).unwrap();
    let free_sol = cli::solve(&free_config, &free).unwrap();
    let min_vol = (0..=free_sol.trajectory.n_steps())
        .map(|i| polygon_volume(&free_sol.trajectory.state_at(i), 0).unwrap())
        .fold(f64::INFINITY, f64::min);

    // With it the volume stays put while the match still lands.
    let sol = cli::solve(&config, &constrained).unwrap();
    let max_drift = (0..=sol.trajectory.n_steps())
        .map(|i| {
            let v = polygon_volume(&sol.trajectory.state_at(i), 0).unwrap();
            (v - vol0).abs() / vol0
        })
        .fold(0.0, f64::max);
    let (attach0, _) = constrained.attachment_and_grad(&constrained.q0).unwrap();
    let attach_ratio = sol.report.attachment / attach0;

    let elapsed = start.elapsed().as_secs_f64();
    let pass = min_vol < SHRINK_FACTOR * vol0
        && max_drift < DRIFT_BOUND
        && attach_ratio < ATTACHMENT_FACTOR
        && elapsed < BUDGET_SECS;
    report(
        "4 volume preservation",
        pass,
        &format!(
            "free min vol {:.4} of {:.4}, constrained drift {:.2e}, attachment ratio {:.3}, {:.1}s of {}s",
            min_vol, vol0, max_drift, attach_ratio, elapsed, BUDGET_SECS
        ),
    );
}

// -------------------------------------------------------------------------
// 5. Multishape coupling: stitched glue vs sliding tangential slip.
// -------------------------------------------------------------------------

fn paired_indices(q: &LandmarkState, a: &str, b: &str) -> Vec<(usize, usize)> {
    let ga = q.group_named(a).unwrap();
    let gb = q.group_named(b).unwrap();
    q.groups()[ga]
        .indices
        .iter()
        .copied()
        .zip(q.groups()[gb].indices.iter().copied())
        .collect()
}

#[test]
fn acceptance_5_multishape_coupling() {
    const SLIP_RESIDUAL: f64 = 1e-3;
    const BUDGET_SECS: f64 = 60.0;
    let start = Instant::now();

    // Stitched: boundary copies must ride along with their curves.
    let config = builtin_config("multishape-stitched").unwrap();
    let problem = io::build_problem(&config, std::path::Path::new(".")).unwrap();
    let diameter = problem.q0.diameter();
    let glue_bound = 1e-6 * diameter;
    let sol = cli::solve(&config, &problem).unwrap();
    let mut glue_gap = 0.0f64;
    for (a, b) in [
        ("ellipse", "ellipse-boundary"),
        ("flower", "flower-boundary"),
    ] {
        let pairs = paired_indices(&problem.q0, a, b);
        for i in 0..=sol.trajectory.n_steps() {
            let state = sol.trajectory.state_at(i);
            for &(l, r) in &pairs {
                for c in 0..2 {
                    glue_gap = glue_gap.max((state.point(l)[c] - state.point(r)[c]).abs());
                }
            }
        }
    }
    let stitched_ok = glue_gap < glue_bound;

    // Sliding: normal velocities agree while the curve slides tangentially
    // along its boundary copy.
    let config = builtin_config("multishape-sliding").unwrap();
    let problem = io::build_problem(&config, std::path::Path::new(".")).unwrap();
    let slide_diameter = problem.q0.diameter();
    let sol = cli::solve(&config, &problem).unwrap();
    let normal_residual = sol.report.constraint_violation;

    let pairs = paired_indices(&problem.q0, "ellipse", "ellipse-boundary");
    let finals = sol.trajectory.final_state();
    let bg = problem.q0.group_named("ellipse-boundary").unwrap();
    let bg_indices = &problem.q0.groups()[bg].indices;
    let mut max_tangential = 0.0f64;
    for (slot, &(l, r)) in pairs.iter().enumerate() {
        let prev = bg_indices[(slot + bg_indices.len() - 1) % bg_indices.len()];
        let next = bg_indices[(slot + 1) % bg_indices.len()];
        let tx = finals.point(next)[0] - finals.point(prev)[0];
        let ty = finals.point(next)[1] - finals.point(prev)[1];
        let len = tx.hypot(ty).max(1e-12);
        let dx = finals.point(l)[0] - finals.point(r)[0];
        let dy = finals.point(l)[1] - finals.point(r)[1];
        max_tangential = max_tangential.max((dx * tx + dy * ty).abs() / len);
    }
    let slip_floor = 1e-3 * slide_diameter;
    let sliding_ok = normal_residual < SLIP_RESIDUAL && max_tangential > slip_floor;

    let elapsed = start.elapsed().as_secs_f64();
    report(
        "5 multishape coupling",
        stitched_ok && sliding_ok && elapsed < BUDGET_SECS,
        &format!(
            "glue gap {:.2e} (bound {:.2e}), normal residual {:.2e}, tangential slip {:.3} (floor {:.4}), {:.1}s of {}s",
            glue_gap, glue_bound, normal_residual, max_tangential, slip_floor, elapsed, BUDGET_SECS
        ),
    );
}

// -------------------------------------------------------------------------
// 6. Tiny instances: structured solvers vs exhaustive control search.
// -------------------------------------------------------------------------

#[test]
fn acceptance_6_oracle_equivalence() {
    const AGREE_TOL: f64 = 1e-2;
    const BUDGET_SECS: f64 = 60.0;
    let start = Instant::now();

    let line_1d = {
        let q0 = LandmarkState::single(1, vec![0.0]).unwrap();
        let target = LandmarkState::single(1, vec![1.0]).unwrap();
        let kernels = GroupKernels::uniform(KernelSpec::gaussian(1.0).unwrap(), &q0);
        MatchProblem::new(kernels, q0, target, 1.0, ConstraintSet::empty()).unwrap()
    };
    let blocked_2d = {
        let q0 = LandmarkState::single(2, vec![0.0, 0.0]).unwrap();
        let target = LandmarkState::single(2, vec![0.9, 0.4]).unwrap();
        let kernels = GroupKernels::uniform(KernelSpec::gaussian(1.0).unwrap(), &q0);
        let cs = ConstraintSet::new(vec![Box::new(fixed_direction_constraint(
            0,
            vec![0.0, 1.0],
        ))]);
        MatchProblem::new(kernels, q0, target, 1.0, cs).unwrap()
    };

    let mut detail = String::new();
    let mut pass = true;
    for (name, problem) in [("line-1d", &line_1d), ("blocked-2d", &blocked_2d)] {
        let options = SolverOptions::default();
        let shot = minimize_shooting(problem, 50, &options)
            .unwrap()
            .report
            .objective;
        let al = minimize_augmented_lagrangian(problem, 50, &options)
            .unwrap()
            .report
            .objective;
        let oracle = brute_force_oracle(problem, 4).unwrap();
        let spread = [shot, al, oracle];
        let lo = spread.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        let hi = spread.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let rel = (hi - lo) / (1.0 + lo.abs());
        pass &= rel < AGREE_TOL;
        detail.push_str(&format!(
            "{}: shooting {:.4}, al {:.4}, oracle {:.4}, spread {:.2e}; ",
            name, shot, al, oracle, rel
        ));
    }

    let elapsed = start.elapsed().as_secs_f64();
    detail.push_str(&format!("{:.2}s of {}s", elapsed, BUDGET_SECS));
    report(
        "6 oracle equivalence",
        pass && elapsed < BUDGET_SECS,
        &detail,
    );
}

// -------------------------------------------------------------------------
// 7. Without constraints the two solvers optimize the same objective.
// -------------------------------------------------------------------------

#[test]
fn acceptance_7_solver_consistency() {
    const AGREE_TOL: f64 = 1e-3;
    const BUDGET_SECS: f64 = 60.0;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);

    let problem = five_landmark_problem(&mut rng, false);
    let n_steps = 60;
    let options = SolverOptions::default();
    let shot = minimize_shooting(&problem, n_steps, &options).unwrap();
    let al = minimize_augmented_lagrangian(&problem, n_steps, &options).unwrap();
    let rel =
        (shot.report.objective - al.report.objective).abs() / (1.0 + shot.report.objective.abs());

    let elapsed = start.elapsed().as_secs_f64();
    report(
        "7 solver consistency",
        rel < AGREE_TOL && elapsed < BUDGET_SECS,
        &format!(
            "shooting {:.6}, al {:.6}, rel diff {:.2e}, {:.1}s of {}s",
            shot.report.objective, al.report.objective, rel, elapsed, BUDGET_SECS
        ),
    );
}
