use asymphase::fiber::{FiberProblem, SolverConfig};
use asymphase::splitting::{estimate_constants, ConstantsConfig, PeriodicSource, SplittingConfig};
use asymphase::systems::builtin_shear_cycle;
use nalgebra::DVector;

fn main() {
    let sys = builtin_shear_cycle(1.0, 1.0);
    let source = PeriodicSource::new(sys, SplittingConfig::default()).unwrap();
    let constants = estimate_constants(&source, 0.1, 0.2, &ConstantsConfig::default()).unwrap();
    println!(
        "c={:.4} alpha={:.4} K={:.4} C={:.4} r={:.5} R={:.5} kappa={:.4} shrinks={}",
        constants.c, constants.alpha, constants.k_proj, constants.c_lip,
        constants.r, constants.big_r, constants.kappa, constants.shrink_steps
    );
    let cfg = SolverConfig::from_constants(&constants, 1e-12, constants.r);
    println!("t_trunc={:.3} n={} eta_radius={:.5} envelope={:.5}", cfg.t_trunc, cfg.n_intervals, cfg.eta_radius, cfg.envelope);
    let xi = DVector::from_vec(vec![1.0, 0.0]);
    let problem = FiberProblem::new(&source, &xi, &constants, &cfg).unwrap();
    let eta = problem.base_frame().basis_minus.column(0) * (0.9 * constants.r);
    let sol = problem.solve(&eta.clone_owned()).unwrap();
    println!("iterations={} ratios={:?}", sol.iterations, sol.contraction_ratios);
    println!("weighted_residual={:.3e} h={:.4e}", sol.weighted_residual, sol.h_correction.norm());
}
