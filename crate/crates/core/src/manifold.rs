//! Local charts, normal frames and tubular-neighborhood coordinates on the
//! invariant manifold.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{self, IntegratorConfig, TrajectorySegment};
use crate::splitting::SplittingSource;
use crate::subspace;
use crate::systems::{ManifoldDescriptor, SystemSpec};

/// Default membership tolerance for descriptor residuals.
pub const MEMBERSHIP_TOL: f64 = 1e-6;
/// Minimal admissible angle between the normal-like directions and the
/// tangent space.
pub const DEFAULT_MIN_ANGLE: f64 = 1e-3;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;

/// Residual measuring how far `x` is from satisfying the descriptor.
pub fn manifold_residual(
    sys: &SystemSpec,
    desc: &ManifoldDescriptor,
    x: &DVector<f64>,
    integ: &IntegratorConfig,
) -> Result<f64> {
    match desc {
        ManifoldDescriptor::LimitCycle { period, .. } => {
            let back = flow::flow_to(sys, x, *period, integ)?;
            Ok((back - x).norm())
        }
        ManifoldDescriptor::TorusProduct { factors } => {
            let mut worst: f64 = 0.0;
            for i in 0..factors.len() {
                let r = (x[2 * i] * x[2 * i] + x[2 * i + 1] * x[2 * i + 1]).sqrt();
                worst = worst.max((r - 1.0).abs());
            }
            Ok(worst)
        }
        ManifoldDescriptor::ParametricChart { map, locate, .. } => {
            let q = locate(x);
            Ok((map(&q) - x).norm())
        }
    }
}

/// Nearest manifold point, its distance, and (for cycles) the time offset of
/// that point from the descriptor seed.
pub struct NearestPoint {
    pub point: DVector<f64>,
    pub distance: f64,
    pub cycle_time: Option<f64>,
}

/// Nearest point on a cycle given its pre-integrated dense segment over one
/// period: coarse scan plus Newton refinement of the time parameter.
pub(crate) fn nearest_on_cycle_segment(
    sys: &SystemSpec,
    seg: &TrajectorySegment,
    period: f64,
    x: &DVector<f64>,
) -> NearestPoint {
    let samples = 256;
    let mut best_tau = 0.0;
    let mut best_d2 = f64::INFINITY;
    for k in 0..samples {
        let tau = period * k as f64 / samples as f64;
        let d2 = (seg.eval(tau) - x).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best_tau = tau;
        }
    }
    // Newton on g(tau) = <chi(tau) - x, v(chi(tau))> = 0.
    let mut tau = best_tau;
    for _ in 0..20 {
        let p = seg.eval(tau.rem_euclid(period));
        let v = sys.eval(&p);
        let diff = &p - x;
        let g = diff.dot(&v);
        let dg = v.norm_squared() + diff.dot(&(sys.jacobian(&p) * &v));
        if dg.abs() < 1e-14 {
            break;
        }
        let step = g / dg;
        tau -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    tau = tau.rem_euclid(period);
    let point = seg.eval(tau);
    NearestPoint {
        distance: (&point - x).norm(),
        point,
        cycle_time: Some(tau),
    }
}

pub fn nearest_on_manifold(
    sys: &SystemSpec,
    desc: &ManifoldDescriptor,
    x: &DVector<f64>,
    integ: &IntegratorConfig,
) -> Result<NearestPoint> {
    match desc {
        ManifoldDescriptor::LimitCycle { period, seed } => {
            let seg = flow::integrate(sys, seed, (0.0, *period), integ)?;
            Ok(nearest_on_cycle_segment(sys, &seg, *period, x))
        }
        ManifoldDescriptor::TorusProduct { factors } => {
            let mut point = x.clone();
            for i in 0..factors.len() {
                let r = (x[2 * i] * x[2 * i] + x[2 * i + 1] * x[2 * i + 1]).sqrt();
                if r < 1e-12 {
                    return Err(Error::OutsideTube {
                        reason: format!("factor {i} sits at the degenerate center r = 0"),
                    });
                }
                point[2 * i] = x[2 * i] / r;
                point[2 * i + 1] = x[2 * i + 1] / r;
            }
            Ok(NearestPoint {
                distance: (&point - x).norm(),
                point,
                cycle_time: None,
            })
        }
        ManifoldDescriptor::ParametricChart { map, locate, .. } => {
            let q = locate(x);
            let point = map(&q);
            Ok(NearestPoint {
                distance: (&point - x).norm(),
                point,
                cycle_time: None,
            })
        }
    }
}

enum ChartKind {
    /// Arclength-like parameter along the cycle, realized by a dense
    /// trajectory segment around the base point.
    Cycle {
        segment: TrajectorySegment,
        speed: f64,
    },
    /// Per-factor angle offsets on the product of unit circles.
    Torus { base_angles: Vec<f64> },
    /// User chart recentred at the base point and reparametrized so the
    /// tangent frame is orthonormal at q = 0.
    Parametric {
        map: crate::systems::ChartMapFn,
        tangent: crate::systems::ChartTangentFn,
        q0: DVector<f64>,
        reparam: DMatrix<f64>,
    },
}

/// Local parametrization of the manifold around a base point, with an
/// orthonormal tangent frame at the origin.
pub struct Chart {
    base: DVector<f64>,
    dim: usize,
    radius: f64,
    sys: SystemSpec,
    kind: ChartKind,
}

impl std::fmt::Debug for Chart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Chart")
            .field("base", &self.base)
            .field("dim", &self.dim)
            .field("radius", &self.radius)
            .finish()
    }
}

impl Chart {
    pub fn base(&self) -> &DVector<f64> {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn check_domain(&self, q: &DVector<f64>) -> Result<()> {
        let norm = q.norm();
        if norm > self.radius * (1.0 + 1e-9) {
            return Err(Error::ChartExceeded {
                q_norm: norm,
                radius: self.radius,
            });
        }
        Ok(())
    }

    /// Manifold point xi(q).
    pub fn map(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_domain(q)?;
        match &self.kind {
            ChartKind::Cycle { segment, speed } => Ok(segment.eval(q[0] / speed)),
            ChartKind::Torus { base_angles } => {
                let mut x = DVector::zeros(self.base.len());
                for (i, &a0) in base_angles.iter().enumerate() {
                    let angle = a0 + q[i];
                    x[2 * i] = angle.cos();
                    x[2 * i + 1] = angle.sin();
                }
                Ok(x)
            }
            ChartKind::Parametric {
                map, q0, reparam, ..
            } => Ok(map(&(q0 + reparam * q))),
        }
    }

    /// Columns d(xi)/dq_i at q.
    pub fn tangent(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_domain(q)?;
        match &self.kind {
            ChartKind::Cycle { segment, speed } => {
                let p = segment.eval(q[0] / speed);
                Ok(DMatrix::from_columns(&[self.sys.eval(&p) / *speed]))
            }
            ChartKind::Torus { base_angles } => {
                let n = self.base.len();
                let mut t = DMatrix::zeros(n, base_angles.len());
                for (i, &a0) in base_angles.iter().enumerate() {
                    let angle = a0 + q[i];
                    t[(2 * i, i)] = -angle.sin();
                    t[(2 * i + 1, i)] = angle.cos();
                }
                Ok(t)
            }
            ChartKind::Parametric {
                tangent,
                q0,
                reparam,
                ..
            } => Ok(tangent(&(q0 + reparam * q)) * reparam),
        }
    }
}

/// Build a chart at `xi0`. Cycle charts use the flow-time parameter rescaled
/// to unit speed at the base point; torus charts use angle offsets; user
/// charts are recentred and orthonormalized.
pub fn build_chart(
    sys: &SystemSpec,
    desc: &ManifoldDescriptor,
    xi0: &DVector<f64>,
    radius: f64,
    integ: &IntegratorConfig,
) -> Result<Chart> {
    let residual = manifold_residual(sys, desc, xi0, integ)?;
    if residual > MEMBERSHIP_TOL {
        return Err(Error::OffManifold {
            residual,
            tol: MEMBERSHIP_TOL,
        });
    }
    match desc {
        ManifoldDescriptor::LimitCycle { period, .. } => {
            let v = sys.eval(xi0);
            let speed = v.norm();
            if speed < 1e-12 {
                return Err(Error::InvalidArgument(
                    "field vanishes at the chart base point".into(),
                ));
            }
            // Never wrap past half the cycle.
            let radius = radius.min(0.45 * period * speed);
            let t_half = radius / speed * 1.05;
            let fwd = flow::integrate(sys, xi0, (0.0, t_half), integ)?;
            let bwd = flow::integrate(sys, xi0, (0.0, -t_half), integ)?;
            let segment = join_segments(bwd, fwd)?;
            Ok(Chart {
                base: xi0.clone(),
                dim: 1,
                radius,
                sys: sys.clone(),
                kind: ChartKind::Cycle { segment, speed },
            })
        }
        ManifoldDescriptor::TorusProduct { factors } => {
            let base_angles: Vec<f64> = (0..factors.len())
                .map(|i| xi0[2 * i + 1].atan2(xi0[2 * i]))
                .collect();
            Ok(Chart {
                base: xi0.clone(),
                dim: factors.len(),
                radius: radius.min(std::f64::consts::FRAC_PI_2),
                sys: sys.clone(),
                kind: ChartKind::Torus { base_angles },
            })
        }
        ManifoldDescriptor::ParametricChart {
            dim,
            map,
            tangent,
            locate,
            domain_radius,
        } => {
            let q0 = locate(xi0);
            let t0 = tangent(&q0);
            let qr = t0.clone().qr();
            let rmat = qr.r();
            let reparam = rmat.try_inverse().ok_or_else(|| {
                Error::InvalidArgument("chart tangent frame is rank deficient".into())
            })?;
            Ok(Chart {
                base: xi0.clone(),
                dim: *dim,
                radius: radius.min(*domain_radius),
                sys: sys.clone(),
                kind: ChartKind::Parametric {
                    map: Arc::clone(map),
                    tangent: Arc::clone(tangent),
                    q0,
                    reparam,
                },
            })
        }
    }
}

/// Glue a backward and a forward segment from the same base point into one
/// segment spanning [-t, +t].
fn join_segments(bwd: TrajectorySegment, fwd: TrajectorySegment) -> Result<TrajectorySegment> {
    TrajectorySegment::join(bwd, fwd)
}

/// Orthonormal frame of the normal-like directions (the stable complement of
/// the tangent space) over a chart, continuous in the chart parameter.
pub struct NormalFrame {
    chart: Chart,
    source: Arc<dyn SplittingSource>,
    reference: DMatrix<f64>,
    sample_qs: Vec<DVector<f64>>,
    sample_frames: Vec<DMatrix<f64>>,
    tube_radius: f64,
    min_angle: f64,
}

impl NormalFrame {
    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn codim(&self) -> usize {
        self.reference.ncols()
    }

    pub fn tube_radius(&self) -> f64 {
        self.tube_radius
    }

    pub fn reference(&self) -> &DMatrix<f64> {
        &self.reference
    }

    pub fn sample_qs(&self) -> &[DVector<f64>] {
        &self.sample_qs
    }

    /// nu(q): normal-like frame at xi(q), aligned for continuity against the
    /// nearest construction sample.
    pub fn eval(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let xi = self.chart.map(q)?;
        let frame = self.source.splitting_at(&xi)?;
        self.align_raw(q, &frame.j_minus, &self.tangent_at(q)?)
    }

    /// Same alignment path, but with an externally computed splitting frame
    /// (lets callers that already solved the splitting reuse it).
    pub fn eval_with_frame(
        &self,
        q: &DVector<f64>,
        splitting: &crate::splitting::SplittingFrame,
    ) -> Result<DMatrix<f64>> {
        self.align_raw(q, &splitting.j_minus, &self.tangent_at(q)?)
    }

    fn tangent_at(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(subspace::orthonormalize(&self.chart.tangent(q)?))
    }

    fn align_raw(
        &self,
        q: &DVector<f64>,
        raw: &DMatrix<f64>,
        tangent: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let angle = subspace::min_principal_angle(raw, tangent);
        if angle < self.min_angle {
            return Err(Error::DegenerateAngle {
                angle,
                min: self.min_angle,
            });
        }
        let ortho = subspace::orthonormalize(raw);
        let mut best = &self.reference;
        let mut best_d = f64::INFINITY;
        for (sq, sf) in self.sample_qs.iter().zip(self.sample_frames.iter()) {
            let d = (sq - q).norm();
            if d < best_d {
                best_d = d;
                best = sf;
            }
        }
        Ok(subspace::align_to(&ortho, best))
    }
}

/// Build the normal frame over a chart, sampling the splitting on a small
/// grid and aligning frames outward from the center (Gram-Schmidt seeded from
/// the neighboring sample keeps the field free of sign flips).
pub fn build_normal_frame(
    chart: Chart,
    source: Arc<dyn SplittingSource>,
    tube_radius: f64,
    min_angle: f64,
) -> Result<NormalFrame> {
    let m = chart.dim();
    let q_zero = DVector::zeros(m);
    let xi0 = chart.map(&q_zero)?;
    let frame0 = source.splitting_at(&xi0)?;
    let tangent0 = subspace::orthonormalize(&chart.tangent(&q_zero)?);
    let angle0 = subspace::min_principal_angle(&frame0.j_minus, &tangent0);
    if angle0 < min_angle {
        return Err(Error::DegenerateAngle {
            angle: angle0,
            min: min_angle,
        });
    }
    let reference = subspace::orthonormalize(&frame0.j_minus);

    // Sample grid: axis paths outward from the center, one pass per axis.
    let per_axis = match m {
        1 => 9,
        2 => 5,
        _ => 3,
    };
    let mut sample_qs = vec![q_zero.clone()];
    let mut sample_frames = vec![reference.clone()];
    for axis in 0..m {
        for sign in [-1.0, 1.0] {
            let mut prev = reference.clone();
            for step in 1..=(per_axis / 2) {
                let mut q = DVector::zeros(m);
                q[axis] = sign * chart.radius() * step as f64 / (per_axis / 2) as f64;
                let xi = chart.map(&q)?;
                let f = source.splitting_at(&xi)?;
                let tangent = subspace::orthonormalize(&chart.tangent(&q)?);
                let angle = subspace::min_principal_angle(&f.j_minus, &tangent);
                if angle < min_angle {
                    return Err(Error::DegenerateAngle {
                        angle,
                        min: min_angle,
                    });
                }
                let aligned = subspace::align_to(&subspace::orthonormalize(&f.j_minus), &prev);
                prev = aligned.clone();
                sample_qs.push(q);
                sample_frames.push(aligned);
            }
        }
    }

    Ok(NormalFrame {
        chart,
        source,
        reference,
        sample_qs,
        sample_frames,
        tube_radius,
        min_angle,
    })
}

/// Coordinates of an ambient point relative to the manifold: the foot point
/// xi(q) and the normal offset zeta = nu(q) z.
#[derive(Debug, Clone)]
pub struct TubularPoint {
    pub xi: DVector<f64>,
    pub zeta: DVector<f64>,
    pub q: DVector<f64>,
    pub z: DVector<f64>,
}

impl TubularPoint {
    pub fn ambient(&self) -> DVector<f64> {
        &self.xi + &self.zeta
    }
}

/// Solve xi(q) + nu(q) z = x for (q, z) by Newton iteration with the frozen
/// frame Jacobian [xi'(q) | nu(q)] (the d(nu)/dq z term is O(|z|) and only
/// affects the step, not the solution).
pub fn tubular_decompose(frame: &NormalFrame, x: &DVector<f64>) -> Result<TubularPoint> {
    let m = frame.chart.dim();
    let n = x.len();
    let codim = frame.codim();
    let mut q = DVector::zeros(m);
    let mut z = DVector::zeros(codim);

    for iter in 0..NEWTON_MAX_ITER {
        let xi = frame.chart.map(&q).map_err(|e| match e {
            Error::ChartExceeded { q_norm, radius } => Error::OutsideTube {
                reason: format!("chart coordinate left the domain (|q| = {q_norm:.3e} > {radius:.3e})"),
            },
            other => other,
        })?;
        let nu = frame.eval(&q)?;
        let residual = &xi + &nu * &z - x;
        if residual.norm() <= NEWTON_TOL {
            let zeta = &nu * &z;
            if z.norm() >= frame.tube_radius {
                return Err(Error::OutsideTube {
                    reason: format!(
                        "normal offset |z| = {:.3e} exceeds the tube radius {:.3e}",
                        z.norm(),
                        frame.tube_radius
                    ),
                });
            }
            return Ok(TubularPoint { xi, zeta, q, z });
        }
        let tangent = frame.chart.tangent(&q)?;
        let mut jac = DMatrix::zeros(n, m + codim);
        jac.columns_mut(0, m).copy_from(&tangent);
        jac.columns_mut(m, codim).copy_from(&nu);
        let delta = jac.lu().solve(&residual).ok_or_else(|| Error::OutsideTube {
            reason: "tubular Newton system is singular".into(),
        })?;
        for i in 0..m {
            q[i] -= delta[i];
        }
        for i in 0..codim {
            z[i] -= delta[m + i];
        }
        if iter == NEWTON_MAX_ITER - 1 {
            return Err(Error::OutsideTube {
                reason: format!(
                    "tubular Newton did not converge (residual {:.3e})",
                    residual.norm()
                ),
            });
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitting::{PeriodicSource, SplittingConfig};
    use crate::systems::{builtin_counterexample, builtin_linear_block, builtin_shear_cycle,
        builtin_torus_product};
    use approx::assert_relative_eq;

    fn integ() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    #[test]
    fn shear_chart_is_the_unit_circle() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let desc = sys.manifold().unwrap().clone();
        let xi0 = DVector::from_vec(vec![1.0, 0.0]);
        let chart = build_chart(&sys, &desc, &xi0, 0.5, &integ()).unwrap();
        // xi(q) = (cos q, sin q); tangent at 0 is (0, 1)
        for &q in &[-0.4, -0.1, 0.0, 0.2, 0.5] {
            let p = chart.map(&DVector::from_vec(vec![q])).unwrap();
            assert_relative_eq!(p[0], q.cos(), epsilon = 1e-9);
            assert_relative_eq!(p[1], q.sin(), epsilon = 1e-9);
        }
        let t0 = chart.tangent(&DVector::zeros(1)).unwrap();
        assert_relative_eq!(t0[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(t0[(1, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn counterexample_chart_is_the_same_circle() {
        let sys = builtin_counterexample();
        let desc = sys.manifold().unwrap().clone();
        let xi0 = DVector::from_vec(vec![1.0, 0.0]);
        let chart = build_chart(&sys, &desc, &xi0, 0.5, &integ()).unwrap();
        // speed on the cycle is 2, so the unit-speed parameter is the angle
        let p = chart.map(&DVector::from_vec(vec![0.3])).unwrap();
        assert_relative_eq!(p[0], 0.3f64.cos(), epsilon = 1e-8);
        assert_relative_eq!(p[1], 0.3f64.sin(), epsilon = 1e-8);
    }

    #[test]
    fn torus_chart_tangent_frame_is_orthonormal() {
        let sys = builtin_torus_product(&[(1.0, 1.0), (2.0f64.sqrt(), 0.5)]).unwrap();
        let desc = sys.manifold().unwrap().clone();
        let xi0 = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let chart = build_chart(&sys, &desc, &xi0, 0.5, &integ()).unwrap();
        assert_eq!(chart.dim(), 2);
        let t = chart.tangent(&DVector::zeros(2)).unwrap();
        let gram = t.transpose() * &t;
        assert!((gram - DMatrix::identity(2, 2)).norm() < 1e-10);
    }

    #[test]
    fn off_manifold_points_are_rejected() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let desc = sys.manifold().unwrap().clone();
        let off = DVector::from_vec(vec![1.3, 0.0]);
        let err = build_chart(&sys, &desc, &off, 0.5, &integ()).unwrap_err();
        assert!(matches!(err, Error::OffManifold { .. }));
    }

    #[test]
    fn chart_points_stay_on_the_manifold_under_the_flow() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let desc = sys.manifold().unwrap().clone();
        let xi0 = DVector::from_vec(vec![1.0, 0.0]);
        let chart = build_chart(&sys, &desc, &xi0, 0.5, &integ()).unwrap();
        for &q in &[-0.5, -0.2, 0.1, 0.4] {
            let p = chart.map(&DVector::from_vec(vec![q])).unwrap();
            let moved = flow::flow_to(&sys, &p, 1.7, &integ()).unwrap();
            assert!((moved.norm() - 1.0).abs() < 1e-6);
        }
    }

    fn shear_normal_frame(b: f64) -> NormalFrame {
        let sys = builtin_shear_cycle(1.0, b);
        let desc = sys.manifold().unwrap().clone();
        let xi0 = DVector::from_vec(vec![1.0, 0.0]);
        let chart = build_chart(&sys, &desc, &xi0, 0.5, &integ()).unwrap();
        let source: Arc<dyn SplittingSource> = Arc::new(
            PeriodicSource::new(sys, SplittingConfig::default()).unwrap(),
        );
        build_normal_frame(chart, source, 0.45, DEFAULT_MIN_ANGLE).unwrap()
    }

    #[test]
    fn radial_normal_frame_without_shear() {
        let frame = shear_normal_frame(0.0);
        let nu = frame.eval(&DVector::zeros(1)).unwrap();
        // stable direction is radial: (1, 0) at the base point
        assert!(nu[(0, 0)].abs() > 1.0 - 1e-8);
        assert!(nu[(1, 0)].abs() < 1e-6);
    }

    #[test]
    fn sheared_normal_frame_is_the_stable_eigenvector() {
        let frame = shear_normal_frame(1.0);
        let nu = frame.eval(&DVector::zeros(1)).unwrap();
        // (dphi, dr) = (b, 1) at (1, 0) maps to Cartesian (1, b)/sqrt(1+b^2)
        let expected = DVector::from_vec(vec![1.0, 1.0]).normalize();
        let cosine = nu.column(0).dot(&expected).abs();
        assert!(cosine > 1.0 - 1e-6, "cos = {cosine}");
    }

    #[test]
    fn normal_frame_is_orthonormal_and_continuous() {
        let frame = shear_normal_frame(1.0);
        let mut prev: Option<(DVector<f64>, DMatrix<f64>)> = None;
        for k in 0..=16 {
            let q = DVector::from_vec(vec![-0.5 + k as f64 / 16.0]);
            let nu = frame.eval(&q).unwrap();
            let gram = nu.transpose() * &nu;
            assert!((gram - DMatrix::identity(1, 1)).norm() < 1e-10);
            if let Some((pq, pnu)) = prev {
                let hop = (&nu - &pnu).norm();
                let dq = (&q - &pq).norm();
                assert!(hop <= 4.0 * dq, "frame jump {hop} over dq {dq}");
            }
            prev = Some((q, nu));
        }
    }

    #[test]
    fn tubular_roundtrip_on_the_shear_cycle() {
        let frame = shear_normal_frame(1.0);
        // x on M: z = 0, xi = x
        let on_m = DVector::from_vec(vec![0.2f64.cos(), 0.2f64.sin()]);
        let tp = tubular_decompose(&frame, &on_m).unwrap();
        assert!(tp.z.norm() < 1e-10);
        assert!((tp.xi - &on_m).norm() < 1e-9);

        // synthetic offsets recover (q, z)
        for &(q_true, z_true) in &[(0.0, 0.05), (0.3, -0.1), (-0.2, 0.02)] {
            let qv = DVector::from_vec(vec![q_true]);
            let xi = frame.chart().map(&qv).unwrap();
            let nu = frame.eval(&qv).unwrap();
            let x = &xi + &nu * DVector::from_vec(vec![z_true]);
            let tp = tubular_decompose(&frame, &x).unwrap();
            assert!((tp.q[0] - q_true).abs() < 1e-9, "q {} vs {}", tp.q[0], q_true);
            assert!((tp.z[0] - z_true).abs() < 1e-9, "z {} vs {}", tp.z[0], z_true);
            assert!((tp.ambient() - &x).norm() < 1e-10);
        }
    }

    #[test]
    fn radial_decomposition_without_shear() {
        let frame = shear_normal_frame(0.0);
        let x = DVector::from_vec(vec![1.1, 0.0]);
        let tp = tubular_decompose(&frame, &x).unwrap();
        assert!((tp.xi - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-9);
        assert_relative_eq!(tp.z[0].abs(), 0.1, epsilon = 1e-9);
    }

    #[test]
    fn far_points_are_outside_the_tube() {
        let frame = shear_normal_frame(0.0);
        let x = DVector::from_vec(vec![1.9, 0.0]);
        assert!(matches!(
            tubular_decompose(&frame, &x),
            Err(Error::OutsideTube { .. })
        ));
    }

    #[test]
    fn linear_block_chart_is_the_axis() {
        let sys = builtin_linear_block(2.0, 1.0, 1, 0).unwrap();
        let desc = sys.manifold().unwrap().clone();
        let xi0 = DVector::from_vec(vec![0.0, 0.7]);
        let chart = build_chart(&sys, &desc, &xi0, 2.0, &integ()).unwrap();
        let p = chart.map(&DVector::from_vec(vec![0.3])).unwrap();
        assert_relative_eq!(p[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nearest_point_on_cycle() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let desc = sys.manifold().unwrap().clone();
        let x = DVector::from_vec(vec![0.0, 0.8]);
        let near = nearest_on_manifold(&sys, &desc, &x, &integ()).unwrap();
        assert_relative_eq!(near.distance, 0.2, epsilon = 1e-6);
        assert!((near.point[1] - 1.0).abs() < 1e-6);
    }
}
