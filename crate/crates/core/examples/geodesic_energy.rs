//! Hamiltonian landmark flow: integrate a geodesic and watch the kinetic
//! energy stay put.
//!
//! Run with:
//!   cargo run --example geodesic_energy

use shapeflow::constraints::{volume_constraint, ConstraintSet};
use shapeflow::geodesics::integrate_geodesic;
use shapeflow::kernels::{GroupKernels, KernelSpec};
use shapeflow::shapes::{circle_shape, LandmarkState};

fn main() {
    // A loose cloud of 8 landmarks with outward momenta.
    let coords: Vec<f64> = (0..8)
        .flat_map(|i| {
            let theta = 0.77 * i as f64;
            [theta.cos() * (0.4 + 0.1 * i as f64), theta.sin()]
        })
        .collect();
    let q0 = LandmarkState::single(2, coords).unwrap();
    let kernels = GroupKernels::uniform(KernelSpec::gaussian(0.8).unwrap(), &q0);
    let p0: Vec<f64> = (0..q0.nd())
        .map(|i| 0.9 * (0.31 * i as f64).sin())
        .collect();

    println!("unconstrained flow, 8 landmarks:");
    let coarse = integrate_geodesic(&kernels, &ConstraintSet::empty(), &q0, &p0, 100).unwrap();
    let fine = integrate_geodesic(&kernels, &ConstraintSet::empty(), &q0, &p0, 200).unwrap();
    println!("  energy at t=0:      {:.12}", coarse.energy[0]);
    println!(
        "  energy at t=1:      {:.12}",
        coarse.energy[coarse.n_steps()]
    );
    println!("  drift with N=100:   {:.3e}", coarse.energy_drift());
    println!("  drift with N=200:   {:.3e}", fine.energy_drift());
    println!(
        "  ratio:              {:.1} (RK4 is fourth order, so ~16)",
        coarse.energy_drift() / fine.energy_drift()
    );

    // The same game with a volume row: the reduced Hamiltonian of the
    // projected momentum is the conserved quantity.
    let disc = circle_shape(10, [0.0, 0.0], 1.0).unwrap();
    let kernels = GroupKernels::uniform(KernelSpec::cubic(1.0).unwrap(), &disc);
    let cs = ConstraintSet::new(vec![Box::new(volume_constraint(0))]);
    let p0: Vec<f64> = (0..disc.nd())
        .map(|i| 0.8 * (0.47 * i as f64).cos())
        .collect();
    let traj = integrate_geodesic(&kernels, &cs, &disc, &p0, 100).unwrap();
    println!("volume-constrained flow, 10-gon:");
    println!("  energy at t=0:      {:.12}", traj.energy[0]);
    println!("  drift with N=100:   {:.3e}", traj.energy_drift());
}
