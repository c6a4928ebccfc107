//! Fiber integral equation: Green kernel assembly and the contraction solve.
//!
//! The kernel is evaluated entirely in subspace coordinates. Propagation
//! restricted to the stable bundle is a product of small per-interval
//! coordinate blocks; the plus/neutral branch uses the inverses of its
//! blocks. This keeps every stored quantity bounded by the dichotomy
//! estimates instead of the raw propagator norms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{self, IntegratorConfig, TrajectorySegment};
use crate::manifold;
use crate::splitting::{
    classify_frame, FrameRecipe, HyperbolicConstants, SplittingFrame, SplittingSource,
};
use crate::systems::{ManifoldDescriptor, SystemSpec};

/// Taylor remainder of the field around a trajectory point:
/// w(t, y) = v(chi^t + y) - v(chi^t) - v'(chi^t) y.
pub fn nonlinearity(
    sys: &SystemSpec,
    xi_traj: &TrajectorySegment,
    t: f64,
    y: &DVector<f64>,
) -> DVector<f64> {
    let base = xi_traj.eval(t);
    sys.eval(&(&base + y)) - sys.eval(&base) - sys.jacobian(&base) * y
}

/// Grid, tolerance and envelope settings for the contraction solve.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Truncation horizon of the improper integral.
    pub t_trunc: f64,
    /// Requested number of grid intervals (rounded to the lattice).
    pub n_intervals: usize,
    /// Weighted sup-norm tolerance of the fixed-point iteration.
    pub picard_tol: f64,
    pub max_iter: usize,
    /// Rate used in the weighted norm sup e^{alpha t} |.|.
    pub alpha_weight: f64,
    /// Admissible radius for the stable offset.
    pub eta_radius: f64,
    /// Decay-envelope prefactor for the iterate bound.
    pub envelope: f64,
    /// Contraction factor from the estimated constants, for monitoring.
    pub kappa_ref: f64,
    pub integ: IntegratorConfig,
}

impl SolverConfig {
    /// Derive grid and envelope settings from the estimated constants. The
    /// truncation horizon comes from the tail bound
    /// K C R^2 e^{-2 alpha T} / (2 alpha) < picard_tol with R taken at the
    /// working scale `eta_scale`.
    pub fn from_constants(
        constants: &HyperbolicConstants,
        picard_tol: f64,
        eta_scale: f64,
    ) -> Self {
        let alpha = constants.alpha;
        let envelope = constants
            .big_r
            .max(1.6 * constants.c * eta_scale.abs());
        let t_trunc = if constants.c_lip > 0.0 {
            let arg =
                constants.k_proj * constants.c_lip * envelope * envelope / (2.0 * alpha * picard_tol);
            (arg.max(std::f64::consts::E).ln() / (2.0 * alpha) + 0.5).clamp(3.0, 40.0)
        } else {
            (6.0 / alpha).max(3.0)
        };
        let h_target = 1.0 / (12.0 * alpha);
        let mut n = (t_trunc / h_target).ceil() as usize;
        if n % 2 == 1 {
            n += 1;
        }
        Self {
            t_trunc,
            n_intervals: n.max(8),
            picard_tol,
            max_iter: 200,
            alpha_weight: alpha,
            eta_radius: constants.r.max(eta_scale.abs() * 1.05),
            envelope,
            kappa_ref: constants.kappa,
            integ: IntegratorConfig::default(),
        }
    }

    /// Tail of the truncated integral under the configured horizon.
    pub fn tail_bound(&self, constants: &HyperbolicConstants) -> f64 {
        constants.k_proj * constants.c_lip * self.envelope * self.envelope
            * (-2.0 * self.alpha_weight * self.t_trunc).exp()
            / (2.0 * self.alpha_weight)
    }
}

/// Composite quadrature weights over `k` uniform intervals of width `h`.
/// Even counts use Simpson throughout; odd counts >= 3 place one 3/8 block
/// at the end (`odd_block_at_end`) or at the start; a single interval falls
/// back to the trapezoid rule.
fn quadrature_weights(k: usize, h: f64, odd_block_at_end: bool) -> Vec<f64> {
    match k {
        0 => vec![0.0],
        1 => vec![0.5 * h, 0.5 * h],
        _ => {
            let mut w = vec![0.0; k + 1];
            let simpson = |w: &mut [f64], from: usize, to: usize, h: f64| {
                let mut j = from;
                while j + 2 <= to {
                    w[j] += h / 3.0;
                    w[j + 1] += 4.0 * h / 3.0;
                    w[j + 2] += h / 3.0;
                    j += 2;
                }
            };
            let three_eighth = |w: &mut [f64], from: usize, h: f64| {
                w[from] += 3.0 * h / 8.0;
                w[from + 1] += 9.0 * h / 8.0;
                w[from + 2] += 9.0 * h / 8.0;
                w[from + 3] += 3.0 * h / 8.0;
            };
            if k % 2 == 0 {
                simpson(&mut w, 0, k, h);
            } else if odd_block_at_end {
                simpson(&mut w, 0, k - 3, h);
                three_eighth(&mut w, k - 3, h);
            } else {
                three_eighth(&mut w, 0, h);
                simpson(&mut w, 3, k, h);
            }
            w
        }
    }
}

/// The Green kernel of the linearized equation along the trajectory of a
/// base point, in subspace coordinates on a uniform grid.
pub struct GreenKernel {
    sys: SystemSpec,
    xi: DVector<f64>,
    grid: Vec<f64>,
    h: f64,
    /// States chi^{t_j}(xi) on the grid.
    states: Vec<DVector<f64>>,
    /// Field values at the states.
    velocities: Vec<DVector<f64>>,
    /// Jacobians at the states.
    jacobians: Vec<DMatrix<f64>>,
    frames: Vec<SplittingFrame>,
    n_minus: usize,
    n_pz: usize,
    /// Coordinate-extraction rows: eta-coords = dual_minus[j] * x.
    dual_minus: Vec<DMatrix<f64>>,
    dual_pz: Vec<DMatrix<f64>>,
    /// Plus/neutral block bases [basis_plus | basis_zero] per node.
    basis_pz: Vec<DMatrix<f64>>,
    /// Stable coordinate propagators M(i, j) = coords of X^{t_i - s_j} on the
    /// stable bundle, for j <= i.
    prop_minus: Vec<Vec<DMatrix<f64>>>,
    /// Plus/neutral coordinate propagators W(i, j) for j >= i, stored at
    /// index j - i.
    prop_pz: Vec<Vec<DMatrix<f64>>>,
    /// Quadrature weights of the two kernel branches per evaluation node.
    w_minus: Vec<Vec<f64>>,
    w_plus: Vec<Vec<f64>>,
    /// Largest invariance defect seen while restricting propagators.
    pub coupling_defect: f64,
}

impl GreenKernel {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn frame(&self, j: usize) -> &SplittingFrame {
        &self.frames[j]
    }

    pub fn base_frame(&self) -> &SplittingFrame {
        &self.frames[0]
    }

    pub fn base_point(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    /// Kernel matrix G(t_i, s_j): the propagated stable projection for
    /// t > s, minus the propagated plus/neutral projection for t <= s.
    pub fn eval(&self, i: usize, j: usize) -> DMatrix<f64> {
        if j < i {
            &self.frames[i].basis_minus * &self.prop_minus[i][j] * &self.dual_minus[j]
        } else {
            -(&self.basis_pz[i] * &self.prop_pz[i][j - i] * &self.dual_pz[j])
        }
    }

    /// Quadrature approximation of the kernel integral with grid samples `f`
    /// of the forcing, evaluated at node `i`. The quadrature splits at
    /// s = t_i so each branch integrates a smooth kernel.
    pub fn apply(&self, f: &[DVector<f64>], i: usize) -> DVector<f64> {
        let g_minus: Vec<DVector<f64>> = f
            .iter()
            .enumerate()
            .map(|(j, fj)| &self.dual_minus[j] * fj)
            .collect();
        let g_pz: Vec<DVector<f64>> = f
            .iter()
            .enumerate()
            .map(|(j, fj)| &self.dual_pz[j] * fj)
            .collect();
        self.integral_at(&g_minus, &g_pz, i)
    }

    fn integral_at(
        &self,
        g_minus: &[DVector<f64>],
        g_pz: &[DVector<f64>],
        i: usize,
    ) -> DVector<f64> {
        let n_nodes = self.grid.len();
        let mut acc_minus = DVector::zeros(self.n_minus);
        for j in 0..=i {
            let w = self.w_minus[i][j];
            if w != 0.0 {
                acc_minus += (&self.prop_minus[i][j] * &g_minus[j]) * w;
            }
        }
        let mut acc_pz = DVector::zeros(self.n_pz);
        for j in i..n_nodes {
            let w = self.w_plus[i][j - i];
            if w != 0.0 {
                acc_pz += (&self.prop_pz[i][j - i] * &g_pz[j]) * w;
            }
        }
        &self.frames[i].basis_minus * acc_minus - &self.basis_pz[i] * acc_pz
    }
}

/// One fiber problem: the kernel along the trajectory of `xi` plus solver
/// settings; solves the integral equation for arbitrary stable offsets.
pub struct FiberProblem {
    kernel: GreenKernel,
    cfg: SolverConfig,
}

/// Solution of the fiber equation for one (xi, eta).
#[derive(Debug, Clone)]
pub struct FiberSolution {
    pub xi: DVector<f64>,
    pub eta: DVector<f64>,
    pub grid: Vec<f64>,
    pub y_star: Vec<DVector<f64>>,
    /// The linear part X^{t_i} eta of the solution.
    pub linear_part: Vec<DVector<f64>>,
    /// Graph correction in the plus/neutral subspace (integral form).
    pub h_correction: DVector<f64>,
    /// y*(0) - eta, the direct form of the correction.
    pub h_direct: DVector<f64>,
    pub iterations: usize,
    pub weighted_residual: f64,
    pub contraction_ratios: Vec<f64>,
    pub envelope_used: f64,
    /// Measured quadratic-defect ratio sup e^{alpha t} |y* - X^t eta| / |eta|^2.
    pub c0_ratio: f64,
    /// Whether |eta| lay inside the rigorously admissible ball.
    pub within_rigorous_ball: bool,
}

impl FiberSolution {
    /// Ambient initial point of the fiber trajectory.
    pub fn initial_point(&self) -> DVector<f64> {
        &self.xi + &self.eta + &self.h_correction
    }
}

impl FiberProblem {
    /// Assemble the kernel along the trajectory of `xi`.
    pub fn new(
        source: &dyn SplittingSource,
        xi: &DVector<f64>,
        constants: &HyperbolicConstants,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        let sys = source.system().clone();
        let desc = source.descriptor().clone();
        let recipe = source.frame_recipe();
        let band = source.config().neutral_band;
        let integ = &cfg.integ;

        // Lattice layout: h divides the period for the monodromy recipe so a
        // node's period window ends exactly on a node.
        let h_req = cfg.t_trunc / cfg.n_intervals as f64;
        let (h, n_main, k_fwd, k_bwd) = match recipe {
            FrameRecipe::Monodromy { period } => {
                let k_per = (period / h_req).ceil() as usize;
                let h = period / k_per as f64;
                let mut n = (cfg.t_trunc / h).ceil() as usize;
                if n % 2 == 1 {
                    n += 1;
                }
                (h, n, k_per, 0usize)
            }
            FrameRecipe::Windows { horizon } => {
                let h = h_req;
                let mut n = cfg.n_intervals;
                if n % 2 == 1 {
                    n += 1;
                }
                let k = (horizon / h).ceil() as usize;
                (h, n, k, k)
            }
        };

        // Base trajectory and per-interval propagators over the extended
        // lattice [-k_bwd h, (n_main + k_fwd) h].
        let total = n_main + k_fwd + k_bwd;
        let mut states = vec![DVector::zeros(sys.dim()); total + 1];
        let mut phis: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); total];
        let offset = k_bwd;
        states[offset] = xi.clone();
        for k in offset..total {
            let (next, phi) = flow::interval_propagator(&sys, &states[k], h, integ)?;
            states[k + 1] = next;
            phis[k] = phi;
        }
        if k_bwd > 0 {
            // The manifold repels backward in time; re-anchor each backward
            // node onto it so the window products stay on-manifold.
            let cycle_seg = match &desc {
                ManifoldDescriptor::LimitCycle { period, seed } => {
                    Some((flow::integrate(&sys, seed, (0.0, *period), integ)?, *period))
                }
                _ => None,
            };
            let project = |x: DVector<f64>| -> Result<DVector<f64>> {
                match &desc {
                    ManifoldDescriptor::LimitCycle { .. } => {
                        let (seg, period) = cycle_seg.as_ref().unwrap();
                        Ok(manifold::nearest_on_cycle_segment(&sys, seg, *period, &x).point)
                    }
                    _ => Ok(manifold::nearest_on_manifold(&sys, &desc, &x, integ)?.point),
                }
            };
            for k in (0..offset).rev() {
                let raw = flow::flow_to(&sys, &states[k + 1], -h, integ)?;
                states[k] = project(raw)?;
                let (_, phi) = flow::interval_propagator(&sys, &states[k], h, integ)?;
                phis[k] = phi;
            }
        }

        // Per-node frames from lattice products.
        let product = |from: usize, count: usize| -> DMatrix<f64> {
            let mut m = phis[from].clone();
            for phi in phis.iter().skip(from + 1).take(count - 1) {
                m = phi * m;
            }
            m
        };
        let mut frames = Vec::with_capacity(n_main + 1);
        for j in 0..=n_main {
            let idx = offset + j;
            let point = &states[idx];
            let v = sys.eval(point);
            let tangent = desc.tangent_basis(&sys, point);
            let fwd_span = k_fwd as f64 * h;
            let fwd = product(idx, k_fwd);
            let frame = match recipe {
                FrameRecipe::Monodromy { .. } => classify_frame(
                    recipe, point, &fwd, fwd_span, None, 0.0, &v, &tangent, band,
                )?,
                FrameRecipe::Windows { .. } => {
                    let bwd_span = k_bwd as f64 * h;
                    let bwd = product(idx - k_bwd, k_bwd);
                    classify_frame(
                        recipe,
                        point,
                        &fwd,
                        fwd_span,
                        Some(&bwd),
                        bwd_span,
                        &v,
                        &tangent,
                        band,
                    )?
                }
            };
            frames.push(frame);
        }
        let n_minus = frames[0].n_minus();
        let n_pz = frames[0].n_plus() + frames[0].n_zero();
        for (j, f) in frames.iter().enumerate() {
            if f.n_minus() != n_minus || f.n_plus() + f.n_zero() != n_pz {
                return Err(Error::NonHyperbolic {
                    reason: format!(
                        "splitting dimensions change along the trajectory at node {j}"
                    ),
                });
            }
        }

        // Duals and restricted propagators between consecutive nodes.
        let n = sys.dim();
        let mut dual_minus = Vec::with_capacity(n_main + 1);
        let mut dual_pz = Vec::with_capacity(n_main + 1);
        let mut basis_pz = Vec::with_capacity(n_main + 1);
        for f in &frames {
            let mut full = DMatrix::zeros(n, n);
            full.columns_mut(0, n_minus).copy_from(&f.basis_minus);
            full.columns_mut(n_minus, f.n_plus()).copy_from(&f.basis_plus);
            full.columns_mut(n_minus + f.n_plus(), f.n_zero())
                .copy_from(&f.basis_zero);
            let inv = full.clone().lu().try_inverse().ok_or(Error::NonHyperbolic {
                reason: "node basis is numerically degenerate".into(),
            })?;
            dual_minus.push(inv.rows(0, n_minus).clone_owned());
            dual_pz.push(inv.rows(n_minus, n_pz).clone_owned());
            let mut bpz = DMatrix::zeros(n, n_pz);
            bpz.columns_mut(0, f.n_plus()).copy_from(&f.basis_plus);
            bpz.columns_mut(f.n_plus(), f.n_zero()).copy_from(&f.basis_zero);
            basis_pz.push(bpz);
        }

        let mut coupling_defect: f64 = 0.0;
        let mut d_minus = Vec::with_capacity(n_main);
        let mut d_pz = Vec::with_capacity(n_main);
        for k in 0..n_main {
            let phi = &phis[offset + k];
            let moved_minus = phi * &frames[k].basis_minus;
            d_minus.push(&dual_minus[k + 1] * &moved_minus);
            coupling_defect = coupling_defect.max((&dual_pz[k + 1] * &moved_minus).norm());
            let moved_pz = phi * &basis_pz[k];
            d_pz.push(&dual_pz[k + 1] * &moved_pz);
            coupling_defect = coupling_defect.max((&dual_minus[k + 1] * &moved_pz).norm());
        }

        // Cumulative coordinate propagators.
        let mut prop_minus: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n_main + 1);
        prop_minus.push(vec![DMatrix::identity(n_minus, n_minus)]);
        for i in 1..=n_main {
            let mut row = Vec::with_capacity(i + 1);
            for j in 0..i {
                row.push(&d_minus[i - 1] * &prop_minus[i - 1][j]);
            }
            row.push(DMatrix::identity(n_minus, n_minus));
            prop_minus.push(row);
        }
        let mut prop_pz: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); n_main + 1];
        prop_pz[n_main] = vec![DMatrix::identity(n_pz, n_pz)];
        for i in (0..n_main).rev() {
            let lu = d_pz[i].clone().lu();
            let mut row = Vec::with_capacity(n_main - i + 1);
            row.push(DMatrix::identity(n_pz, n_pz));
            for j in (i + 1)..=n_main {
                let prev = &prop_pz[i + 1][j - (i + 1)];
                let solved = lu.solve(prev).ok_or(Error::SingularPropagator {
                    cond: f64::INFINITY,
                    limit: flow::SINGULAR_CONDITION_LIMIT,
                })?;
                row.push(solved);
            }
            prop_pz[i] = row;
        }

        // Quadrature weights for both branches at every evaluation node. The
        // 3/8 block of odd segments sits next to the split point s = t_i.
        let mut w_minus = Vec::with_capacity(n_main + 1);
        let mut w_plus = Vec::with_capacity(n_main + 1);
        for i in 0..=n_main {
            w_minus.push(quadrature_weights(i, h, true));
            w_plus.push(quadrature_weights(n_main - i, h, false));
        }

        let grid: Vec<f64> = (0..=n_main).map(|j| j as f64 * h).collect();
        let velocities: Vec<DVector<f64>> = (0..=n_main)
            .map(|j| sys.eval(&states[offset + j]))
            .collect();
        let jacobians: Vec<DMatrix<f64>> = (0..=n_main)
            .map(|j| sys.jacobian(&states[offset + j]))
            .collect();
        let states_main: Vec<DVector<f64>> =
            states[offset..=offset + n_main].to_vec();

        let kernel = GreenKernel {
            sys,
            xi: xi.clone(),
            grid,
            h,
            states: states_main,
            velocities,
            jacobians,
            frames,
            n_minus,
            n_pz,
            dual_minus,
            dual_pz,
            basis_pz,
            prop_minus,
            prop_pz,
            w_minus,
            w_plus,
            coupling_defect,
        };
        let _ = constants;
        Ok(Self {
            kernel,
            cfg: cfg.clone(),
        })
    }

    pub fn kernel(&self) -> &GreenKernel {
        &self.kernel
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn base_frame(&self) -> &SplittingFrame {
        self.kernel.base_frame()
    }

    /// Taylor remainder at grid node `j` for offset `y`.
    fn remainder(&self, j: usize, y: &DVector<f64>) -> DVector<f64> {
        let k = &self.kernel;
        k.sys.eval(&(&k.states[j] + y)) - &k.velocities[j] - &k.jacobians[j] * y
    }

    /// Solve the integral equation by fixed-point iteration from the linear
    /// part.
    pub fn solve(&self, eta: &DVector<f64>) -> Result<FiberSolution> {
        let k = &self.kernel;
        let n_nodes = k.grid.len();
        let alpha = self.cfg.alpha_weight;

        if eta.norm() >= self.cfg.eta_radius {
            return Err(Error::InvalidArgument(format!(
                "stable offset |eta| = {:.3e} outside the admissible ball (r = {:.3e})",
                eta.norm(),
                self.cfg.eta_radius
            )));
        }
        let eta_in_minus = &k.frames[0].proj_minus * eta;
        if (&eta_in_minus - eta).norm() > 1e-8 * eta.norm().max(1.0) {
            return Err(Error::InvalidArgument(
                "eta must lie in the stable subspace at the base point".into(),
            ));
        }

        // Linear part in stable coordinates: bounded, noise-free.
        let a0 = &k.dual_minus[0] * eta;
        let linear_part: Vec<DVector<f64>> = (0..n_nodes)
            .map(|i| &k.frames[i].basis_minus * (&k.prop_minus[i][0] * &a0))
            .collect();

        let envelope = self.cfg.envelope;
        let weights: Vec<f64> = k.grid.iter().map(|&t| (alpha * t).exp()).collect();
        let bounds: Vec<f64> = k.grid.iter().map(|&t| envelope * (-alpha * t).exp()).collect();

        let mut y = linear_part.clone();
        let mut prev_diff = f64::INFINITY;
        let mut ratios = Vec::new();
        let mut bad_streak = 0usize;
        let mut iterations = 0usize;
        let mut converged = false;

        while iterations < self.cfg.max_iter {
            iterations += 1;
            let w_grid: Vec<DVector<f64>> =
                (0..n_nodes).map(|j| self.remainder(j, &y[j])).collect();
            let g_minus: Vec<DVector<f64>> = (0..n_nodes)
                .map(|j| &k.dual_minus[j] * &w_grid[j])
                .collect();
            let g_pz: Vec<DVector<f64>> = (0..n_nodes)
                .map(|j| &k.dual_pz[j] * &w_grid[j])
                .collect();

            let mut diff: f64 = 0.0;
            let mut y_next = Vec::with_capacity(n_nodes);
            for i in 0..n_nodes {
                let yi = &linear_part[i] + k.integral_at(&g_minus, &g_pz, i);
                let norm = yi.norm();
                if norm > bounds[i] * (1.0 + 1e-9) + 1e-13 {
                    return Err(Error::BoundViolated {
                        t: k.grid[i],
                        norm,
                        bound: bounds[i],
                    });
                }
                diff = diff.max(weights[i] * (&yi - &y[i]).norm());
                y_next.push(yi);
            }
            y = y_next;

            if diff <= self.cfg.picard_tol {
                converged = true;
                break;
            }
            // Ratios are only meaningful while well above the tolerance
            // floor where roundoff dominates the weighted norm.
            if prev_diff.is_finite() && prev_diff > 100.0 * self.cfg.picard_tol {
                let ratio = diff / prev_diff;
                ratios.push(ratio);
                if ratio > 1.0 && diff > 100.0 * self.cfg.picard_tol {
                    bad_streak += 1;
                    if bad_streak >= 3 {
                        return Err(Error::NoContraction {
                            ratio,
                            streak: bad_streak,
                        });
                    }
                } else {
                    bad_streak = 0;
                }
            }
            prev_diff = diff;
        }
        if !converged {
            return Err(Error::NonConvergent {
                iterations,
                residual: prev_diff,
            });
        }

        let within_rigorous_ball = eta.norm() < self.cfg.eta_radius.min(1.0) && ratios_ok(&ratios, self.cfg.kappa_ref);

        // Graph correction both ways: direct difference of the converged
        // iterate, and the plus/neutral integral recomputed from y*.
        let w_grid: Vec<DVector<f64>> = (0..n_nodes).map(|j| self.remainder(j, &y[j])).collect();
        let g_minus: Vec<DVector<f64>> = (0..n_nodes)
            .map(|j| &k.dual_minus[j] * &w_grid[j])
            .collect();
        let g_pz: Vec<DVector<f64>> = (0..n_nodes).map(|j| &k.dual_pz[j] * &w_grid[j]).collect();
        let h_integral = k.integral_at(&g_minus, &g_pz, 0);
        let h_direct = &y[0] - eta;
        let mismatch = (&h_integral - &h_direct).norm();
        if mismatch > 10.0 * self.cfg.picard_tol {
            return Err(Error::InconsistentH {
                diff: mismatch,
                tol: 10.0 * self.cfg.picard_tol,
            });
        }

        let mut c0_ratio: f64 = 0.0;
        if eta.norm() > 0.0 {
            let denom = eta.norm_squared();
            for i in 0..n_nodes {
                let defect = weights[i] * (&y[i] - &linear_part[i]).norm();
                c0_ratio = c0_ratio.max(defect / denom);
            }
        }

        Ok(FiberSolution {
            xi: k.xi.clone(),
            eta: eta.clone(),
            grid: k.grid.clone(),
            y_star: y,
            linear_part,
            h_correction: h_integral,
            h_direct,
            iterations,
            weighted_residual: prev_diff.min(self.cfg.picard_tol),
            contraction_ratios: ratios,
            envelope_used: envelope,
            c0_ratio,
            within_rigorous_ball,
        })
    }

    /// Graph correction h(xi, eta): the plus/neutral part of the solution at
    /// t = 0, validated against the direct difference.
    pub fn h_map(&self, eta: &DVector<f64>) -> Result<(DVector<f64>, FiberSolution)> {
        let sol = self.solve(eta)?;
        Ok((sol.h_correction.clone(), sol))
    }

    /// Measured quadratic-defect constant of a solution.
    pub fn quadratic_defect(&self, sol: &FiberSolution) -> f64 {
        sol.c0_ratio
    }
}

fn ratios_ok(ratios: &[f64], kappa_ref: f64) -> bool {
    if kappa_ref <= 0.0 {
        return true;
    }
    ratios
        .iter()
        .skip(1)
        .all(|&r| r <= kappa_ref + 0.05)
}
