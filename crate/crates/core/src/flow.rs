//! Flow integration and the variational cocycle.
//!
//! Adaptive Dormand-Prince 5(4) with the classic quartic dense-output
//! interpolant. Fundamental matrices are integrated as an n + n^2 augmented
//! system; long-horizon propagators are assembled from short per-interval
//! factors by the callers that need them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::subspace::condition_number;
use crate::systems::SystemSpec;

/// Condition-number ceiling beyond which a propagator is treated as singular.
pub const SINGULAR_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        // Variational solves feed contraction-constant estimates, so the
        // defaults are tight enough to dominate quadrature error downstream.
        Self {
            rtol: 1e-9,
            atol: 1e-11,
            max_steps: 4_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

// Dormand-Prince 5(4) tableau (the abscissae are implicit: every builtin
// field is autonomous, so stages never need the time argument).
const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense-output weights for the quartic interpolant.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

#[derive(Debug, Clone)]
struct DenseStep {
    t: f64,
    h: f64,
    r1: DVector<f64>,
    r2: DVector<f64>,
    r3: DVector<f64>,
    r4: DVector<f64>,
    r5: DVector<f64>,
}

impl DenseStep {
    fn eval(&self, t: f64) -> DVector<f64> {
        let theta = (t - self.t) / self.h;
        let omt = 1.0 - theta;
        &self.r1
            + (&self.r2 + (&self.r3 + (&self.r4 + &self.r5 * omt) * theta) * omt) * theta
    }

    /// Lower end of the time span covered by this step (steps integrated
    /// backward have h < 0).
    fn lower(&self) -> f64 {
        if self.h >= 0.0 {
            self.t
        } else {
            self.t + self.h
        }
    }

    fn upper(&self) -> f64 {
        if self.h >= 0.0 {
            self.t + self.h
        } else {
            self.t
        }
    }
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Core adaptive integrator; collects dense steps over [t0, t1] (either
/// orientation).
fn dopri5<F>(
    f: &F,
    t0: f64,
    t1: f64,
    y0: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<(Vec<DenseStep>, DVector<f64>)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok((Vec::new(), y0.clone()));
    }
    let dir = span.signum();
    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = f(&y);
    if !all_finite(&k1) {
        return Err(Error::NonFinite { t });
    }

    // Conservative initial step from the field magnitude.
    let scale = y.amax().max(1.0);
    let rate = k1.amax().max(1e-8);
    let mut h = dir * (0.01 * scale / rate).min(span.abs()).max(1e-10);

    let mut steps: Vec<DenseStep> = Vec::new();
    let mut n_steps = 0usize;

    while (t1 - t) * dir > 0.0 {
        if n_steps >= cfg.max_steps {
            return Err(Error::StepSizeUnderflow { t, h });
        }
        n_steps += 1;
        if h.abs() < 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::StepSizeUnderflow { t, h });
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }

        let k2 = f(&(&y + &k1 * (A2[0] * h)));
        let k3 = f(&(&y + &k1 * (A3[0] * h) + &k2 * (A3[1] * h)));
        let k4 = f(&(&y + &k1 * (A4[0] * h) + &k2 * (A4[1] * h) + &k3 * (A4[2] * h)));
        let k5 = f(&(&y
            + &k1 * (A5[0] * h)
            + &k2 * (A5[1] * h)
            + &k3 * (A5[2] * h)
            + &k4 * (A5[3] * h)));
        let k6 = f(&(&y
            + &k1 * (A6[0] * h)
            + &k2 * (A6[1] * h)
            + &k3 * (A6[2] * h)
            + &k4 * (A6[3] * h)
            + &k5 * (A6[4] * h)));
        let y_new = &y
            + (&k1 * B[0] + &k3 * B[2] + &k4 * B[3] + &k5 * B[4] + &k6 * B[5]) * h;
        if !all_finite(&y_new) {
            return Err(Error::NonFinite { t });
        }
        let k7 = f(&y_new);

        let err_vec = (&k1 * E[0] + &k3 * E[2] + &k4 * E[3] + &k5 * E[4] + &k6 * E[5]
            + &k7 * E[6])
            * h;
        let mut err_norm = 0.0f64;
        for i in 0..y.len() {
            let tol = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            err_norm += (err_vec[i] / tol).powi(2);
        }
        err_norm = (err_norm / y.len() as f64).sqrt();

        if err_norm <= 1.0 {
            let dy = &y_new - &y;
            let r3 = &k1 * h - &dy;
            let r4 = &dy - &k7 * h - &r3;
            let r5 = (&k1 * D[0] + &k3 * D[2] + &k4 * D[3] + &k5 * D[4] + &k6 * D[5]
                + &k7 * D[6])
                * h;
            steps.push(DenseStep {
                t,
                h,
                r1: y.clone(),
                r2: dy,
                r3,
                r4,
                r5,
            });
            t += h;
            y = y_new;
            k1 = k7; // FSAL
        }

        let factor = if err_norm == 0.0 {
            10.0
        } else {
            (0.9 * err_norm.powf(-0.2)).clamp(0.2, 10.0)
        };
        h *= factor;
    }

    Ok((steps, y))
}

/// A solved trajectory with dense evaluation inside its span.
#[derive(Debug, Clone)]
pub struct TrajectorySegment {
    base: DVector<f64>,
    t_start: f64,
    t_end: f64,
    steps: Vec<DenseStep>,
    end_state: DVector<f64>,
}

impl TrajectorySegment {
    pub fn base_point(&self) -> &DVector<f64> {
        &self.base
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    pub fn end_state(&self) -> &DVector<f64> {
        &self.end_state
    }

    /// Accepted-step boundary times, ascending.
    pub fn grid(&self) -> Vec<f64> {
        if self.steps.is_empty() {
            return vec![self.t_start];
        }
        let mut g: Vec<f64> = self.steps.iter().map(|s| s.lower()).collect();
        g.push(self.steps.last().unwrap().upper());
        g
    }

    pub fn states(&self) -> Vec<DVector<f64>> {
        self.grid().iter().map(|&t| self.eval(t)).collect()
    }

    /// Dense evaluation; `t` must lie within the integrated span (a relative
    /// slack of 1e-9 is tolerated at the ends).
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let lo = self.t_start.min(self.t_end);
        let hi = self.t_start.max(self.t_end);
        let slack = 1e-9 * (hi - lo).max(1.0);
        assert!(
            t >= lo - slack && t <= hi + slack,
            "dense evaluation at t={t} outside span [{lo}, {hi}]"
        );
        if self.steps.is_empty() {
            return self.base.clone();
        }
        let tc = t.clamp(lo, hi);
        // Steps are kept sorted by their lower span end; find the last step
        // starting at or below tc.
        let mut lo_i = 0usize;
        let mut hi_i = self.steps.len();
        while hi_i - lo_i > 1 {
            let mid = (lo_i + hi_i) / 2;
            if self.steps[mid].lower() <= tc {
                lo_i = mid;
            } else {
                hi_i = mid;
            }
        }
        self.steps[lo_i].eval(tc)
    }

    /// Glue a backward and a forward segment sharing the same base point into
    /// one segment spanning both sides.
    pub fn join(bwd: TrajectorySegment, fwd: TrajectorySegment) -> Result<TrajectorySegment> {
        if (&bwd.base - &fwd.base).norm() > 1e-12 {
            return Err(Error::InvalidArgument(
                "joined segments must share their base point".into(),
            ));
        }
        if bwd.t_end > bwd.t_start || fwd.t_end < fwd.t_start {
            return Err(Error::InvalidArgument(
                "join expects (backward, forward) segments".into(),
            ));
        }
        let mut steps = bwd.steps;
        steps.extend(fwd.steps);
        steps.sort_by(|a, b| a.lower().partial_cmp(&b.lower()).unwrap());
        Ok(TrajectorySegment {
            base: fwd.base,
            t_start: bwd.t_end,
            t_end: fwd.t_end,
            steps,
            end_state: fwd.end_state,
        })
    }
}

/// Integrate dx/dt = v(x) over `t_span` from `x0`.
pub fn integrate(
    sys: &SystemSpec,
    x0: &DVector<f64>,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<TrajectorySegment> {
    if !t_span.0.is_finite() || !t_span.1.is_finite() {
        return Err(Error::InvalidArgument("t_span must be finite".into()));
    }
    let f = |y: &DVector<f64>| sys.eval(y);
    let (mut steps, end) = dopri5(&f, t_span.0, t_span.1, x0, cfg)?;
    if t_span.1 < t_span.0 {
        steps.reverse();
    }
    steps.shrink_to_fit();
    Ok(TrajectorySegment {
        base: x0.clone(),
        t_start: t_span.0,
        t_end: t_span.1,
        steps,
        end_state: end,
    })
}

/// End state of the flow after time `t`.
pub fn flow_to(
    sys: &SystemSpec,
    x0: &DVector<f64>,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    Ok(integrate(sys, x0, (0.0, t), cfg)?.end_state().clone())
}

fn pack(x: &DVector<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    let n = x.len();
    let mut z = DVector::zeros(n + n * n);
    z.rows_mut(0, n).copy_from(x);
    for j in 0..n {
        z.rows_mut(n + j * n, n).copy_from(&m.column(j));
    }
    z
}

fn unpack(z: &DVector<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let x = z.rows(0, n).clone_owned();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m.set_column(j, &z.rows(n + j * n, n).clone_owned());
    }
    (x, m)
}

/// Direction of a cocycle cache relative to the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Base trajectory together with the fundamental matrices X^t(x) sampled on
/// the accepted-step grid.
#[derive(Clone)]
pub struct CocycleCache {
    sys: SystemSpec,
    segment: TrajectorySegment,
    grid: Vec<f64>,
    matrices: Vec<DMatrix<f64>>,
    direction: Direction,
    cfg: IntegratorConfig,
}

impl CocycleCache {
    pub fn system(&self) -> &SystemSpec {
        &self.sys
    }

    pub fn segment(&self) -> &TrajectorySegment {
        &self.segment
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn state_at(&self, t: f64) -> DVector<f64> {
        self.segment.eval(t)
    }

    /// X^t(x) for any t within the cached span. Off-grid times are handled by
    /// re-integration from the nearest grid node (matrix interpolation would
    /// break the cocycle law).
    pub fn matrix_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (lo, hi) = self.segment.span();
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        if t < lo - 1e-12 || t > hi + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "t={t} outside cached span [{lo}, {hi}]"
            )));
        }
        // Nearest grid node.
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &ti) in self.grid.iter().enumerate() {
            let d = (ti - t).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        if best_d <= 1e-13 * hi.abs().max(1.0) {
            return Ok(self.matrices[best].clone());
        }
        let anchor_state = self.segment.eval(self.grid[best]);
        let (_, phi) = interval_propagator(&self.sys, &anchor_state, t - self.grid[best], &self.cfg)?;
        Ok(&phi * &self.matrices[best])
    }

    /// X^{t-s}(chi^s(x)) computed as X^t(x) [X^s(x)]^{-1} via LU solve.
    pub fn compose(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let xt = self.matrix_at(t)?;
        let xs = self.matrix_at(s)?;
        let cond = condition_number(&xs);
        if cond > SINGULAR_CONDITION_LIMIT {
            return Err(Error::SingularPropagator {
                cond,
                limit: SINGULAR_CONDITION_LIMIT,
            });
        }
        // X^t inv(X^s) = (X^s^T \ X^t^T)^T
        let lu = xs.transpose().lu();
        let solved = lu
            .solve(&xt.transpose())
            .ok_or(Error::SingularPropagator {
                cond,
                limit: SINGULAR_CONDITION_LIMIT,
            })?;
        Ok(solved.transpose())
    }
}

/// Integrate the variational system d/dt [x, X] = [v(x), v'(x) X] from
/// X(0) = Id, caching X on the accepted-step grid.
pub fn variational(
    sys: &SystemSpec,
    x0: &DVector<f64>,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<CocycleCache> {
    let n = sys.dim();
    let f = |z: &DVector<f64>| {
        let (x, m) = unpack(z, n);
        let v = sys.eval(&x);
        let dm = sys.jacobian(&x) * m;
        pack(&v, &dm)
    };
    let z0 = pack(x0, &DMatrix::identity(n, n));
    let (steps, z_end) = dopri5(&f, t_span.0, t_span.1, &z0, cfg)?;

    let mut grid: Vec<f64> = steps.iter().map(|s| s.t).collect();
    grid.push(t_span.1);
    let mut matrices = Vec::with_capacity(grid.len());
    for s in &steps {
        let (_, m) = unpack(&s.r1, n);
        matrices.push(m);
    }
    let (x_end, m_end) = unpack(&z_end, n);
    matrices.push(m_end);

    // Rebuild an n-dimensional dense segment by projecting the augmented one.
    let mut seg_steps: Vec<DenseStep> = steps
        .iter()
        .map(|s| DenseStep {
            t: s.t,
            h: s.h,
            r1: s.r1.rows(0, n).clone_owned(),
            r2: s.r2.rows(0, n).clone_owned(),
            r3: s.r3.rows(0, n).clone_owned(),
            r4: s.r4.rows(0, n).clone_owned(),
            r5: s.r5.rows(0, n).clone_owned(),
        })
        .collect();
    if t_span.1 < t_span.0 {
        seg_steps.reverse();
    }
    let segment = TrajectorySegment {
        base: x0.clone(),
        t_start: t_span.0,
        t_end: t_span.1,
        steps: seg_steps,
        end_state: x_end,
    };

    let direction = if t_span.1 >= t_span.0 {
        Direction::Forward
    } else {
        Direction::Backward
    };
    Ok(CocycleCache {
        sys: sys.clone(),
        segment,
        grid,
        matrices,
        direction,
        cfg: cfg.clone(),
    })
}

/// One short-interval propagator: returns (chi^dt(x), X^dt(x)).
pub fn interval_propagator(
    sys: &SystemSpec,
    x_from: &DVector<f64>,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = sys.dim();
    if dt == 0.0 {
        return Ok((x_from.clone(), DMatrix::identity(n, n)));
    }
    let f = |z: &DVector<f64>| {
        let (x, m) = unpack(z, n);
        let v = sys.eval(&x);
        let dm = sys.jacobian(&x) * m;
        pack(&v, &dm)
    };
    let z0 = pack(x_from, &DMatrix::identity(n, n));
    let (_, z_end) = dopri5(&f, 0.0, dt, &z0, cfg)?;
    let (x, m) = unpack(&z_end, n);
    Ok((x, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{builtin_counterexample, builtin_linear_block, builtin_shear_cycle};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn default_cfg() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    #[test]
    fn zero_span_returns_initial_state() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let x0 = DVector::from_vec(vec![0.5, 0.2]);
        let seg = integrate(&sys, &x0, (0.0, 0.0), &default_cfg()).unwrap();
        assert_eq!(seg.end_state(), &x0);
        assert_eq!(seg.eval(0.0), x0);
    }

    #[test]
    fn counterexample_returns_after_its_period() {
        // phi(t) = 2t on the cycle, so t = pi is one full turn.
        let sys = builtin_counterexample();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let end = flow_to(&sys, &x0, std::f64::consts::PI, &default_cfg()).unwrap();
        assert!((end - &x0).norm() < 1e-7);
    }

    #[test]
    fn shear_radius_follows_logistic_closed_form() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let x0 = DVector::from_vec(vec![0.5, 0.0]);
        let t = 10.0;
        let end = flow_to(&sys, &x0, t, &default_cfg()).unwrap();
        let u0 = 0.25;
        let u = u0 * (2.0 * t).exp() / (1.0 - u0 + u0 * (2.0 * t).exp());
        assert!((end.norm() - u.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn dense_output_satisfies_semigroup_property() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let x0 = DVector::from_vec(vec![0.6, 0.1]);
        let seg = integrate(&sys, &x0, (0.0, 5.0), &default_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let ti: f64 = rng.gen_range(0.0..4.0);
            let tj: f64 = rng.gen_range(ti..5.0);
            let xi = seg.eval(ti);
            let xj = seg.eval(tj);
            let refl = flow_to(&sys, &xi, tj - ti, &default_cfg()).unwrap();
            assert!(
                (&refl - &xj).norm() < 1e-7,
                "semigroup residual {} at ({},{})",
                (refl - xj).norm(),
                ti,
                tj
            );
        }
    }

    #[test]
    fn variational_identity_at_zero_and_exact_exponentials() {
        let sys = builtin_linear_block(2.0, 1.0, 1, 1).unwrap();
        let x0 = DVector::from_vec(vec![0.3, 0.1, 0.7]);
        let cache = variational(&sys, &x0, (0.0, 1.0), &default_cfg()).unwrap();
        assert_eq!(cache.matrices()[0], DMatrix::identity(3, 3));
        let x1 = cache.matrix_at(1.0).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![
            (-2.0f64).exp(),
            1.0f64.exp(),
            1.0,
        ]));
        assert!((x1 - expected).norm() < 1e-8);
    }

    #[test]
    fn monodromy_multipliers_of_shear_cycle() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let period = 2.0 * std::f64::consts::PI;
        let cache = variational(&sys, &x0, (0.0, period), &default_cfg()).unwrap();
        let m = cache.matrix_at(period).unwrap();
        let eigs = m.complex_eigenvalues();
        let mut mods: Vec<f64> = eigs.iter().map(|z| z.norm()).collect();
        mods.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_relative_eq!(mods[0], 1.0, max_relative = 1e-6);
        assert_relative_eq!(mods[1], (-4.0 * std::f64::consts::PI).exp(), max_relative = 1e-6);
    }

    #[test]
    fn cocycle_law_holds_on_random_pairs() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let x0 = DVector::from_vec(vec![0.9, 0.3]);
        let cache = variational(&sys, &x0, (0.0, 4.0), &default_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s: f64 = rng.gen_range(0.0..4.0);
            let t: f64 = rng.gen_range(0.0..4.0 - 0.0);
            let total = (s + t).min(4.0);
            let xs = cache.matrix_at(s).unwrap();
            let x_total = cache.matrix_at(total).unwrap();
            let chis = cache.state_at(s);
            let (_, x_t_shifted) =
                interval_propagator(&sys, &chis, total - s, &default_cfg()).unwrap();
            let residual = (&x_t_shifted * &xs - &x_total).norm();
            assert!(residual < 1e-6, "cocycle residual {residual}");
        }
    }

    #[test]
    fn velocity_is_transported_by_the_cocycle() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let x0 = DVector::from_vec(vec![0.8, -0.2]);
        let cache = variational(&sys, &x0, (0.0, 5.0), &default_cfg()).unwrap();
        let v0 = sys.eval(&x0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.0..5.0);
            let xt = cache.matrix_at(t).unwrap();
            let residual = (&xt * &v0 - sys.eval(&cache.state_at(t))).norm();
            assert!(residual < 1e-6, "velocity transport residual {residual}");
        }
    }

    #[test]
    fn compose_matches_closed_form_on_linear_block() {
        let sys = builtin_linear_block(2.0, 1.0, 1, 1).unwrap();
        let x0 = DVector::from_vec(vec![0.2, 0.1, 0.5]);
        let cache = variational(&sys, &x0, (0.0, 3.0), &default_cfg()).unwrap();
        // t = s: identity
        let same = cache.compose(1.3, 1.3).unwrap();
        assert!((same - DMatrix::identity(3, 3)).norm() < 1e-8);
        // s = 0: X^t
        let xt = cache.compose(2.0, 0.0).unwrap();
        assert!((&xt - cache.matrix_at(2.0).unwrap()).norm() < 1e-9);
        // stable block of compose(2, 1) is e^{-a (t-s)} = e^{-2}
        let c = cache.compose(2.0, 1.0).unwrap();
        assert_relative_eq!(c[(0, 0)], (-2.0f64).exp(), max_relative = 1e-7);
        assert_relative_eq!(c[(1, 1)], 1.0f64.exp(), max_relative = 1e-7);
        assert_relative_eq!(c[(2, 2)], 1.0, max_relative = 1e-9);
    }

    #[test]
    fn forward_then_negative_compose_agrees_with_backward_integration() {
        let sys = builtin_shear_cycle(1.0, 0.5);
        let x0 = DVector::from_vec(vec![0.9, 0.1]);
        let fwd = variational(&sys, &x0, (0.0, 2.0), &default_cfg()).unwrap();
        let end = fwd.state_at(2.0);
        let bwd = variational(&sys, &end, (0.0, -2.0), &default_cfg()).unwrap();
        // X^{-2}(chi^2(x)) = [X^2(x)]^{-1} = compose(0, 2)
        let via_compose = fwd.compose(0.0, 2.0).unwrap();
        let direct = bwd.matrix_at(-2.0).unwrap();
        assert!(
            (&via_compose - &direct).norm() < 1e-5,
            "time reversal residual {}",
            (via_compose - direct).norm()
        );
    }

    #[test]
    fn nonfinite_states_are_reported() {
        // dx/dt = x^2 blows up in finite time from x = 1 at t = 1.
        use std::sync::Arc;
        let eval: crate::systems::VectorFieldFn =
            Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0]]));
        let jac: crate::systems::JacobianFn =
            Arc::new(|x: &DVector<f64>| DMatrix::from_row_slice(1, 1, &[2.0 * x[0]]));
        let sys = SystemSpec::new("blowup", 1, Default::default(), eval, jac);
        let res = flow_to(&sys, &DVector::from_vec(vec![1.0]), 2.0, &default_cfg());
        assert!(matches!(
            res,
            Err(Error::NonFinite { .. }) | Err(Error::StepSizeUnderflow { .. })
        ));
    }
}
