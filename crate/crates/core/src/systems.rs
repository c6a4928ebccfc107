//! Vector-field abstraction and the built-in example systems.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type VectorFieldFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ChartMapFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ChartTangentFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type LocateFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type PhaseOracleFn = Arc<dyn Fn(&DVector<f64>) -> Option<Vec<f64>> + Send + Sync>;

/// A smooth vector field with analytic Jacobian and optional metadata about
/// its known invariant manifold and closed-form asymptotic phase.
#[derive(Clone)]
pub struct SystemSpec {
    name: String,
    dim: usize,
    params: BTreeMap<String, f64>,
    eval: VectorFieldFn,
    jacobian: JacobianFn,
    manifold: Option<ManifoldDescriptor>,
    phase_oracle: Option<PhaseOracleFn>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("params", &self.params)
            .finish()
    }
}

impl SystemSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        params: BTreeMap<String, f64>,
        eval: VectorFieldFn,
        jacobian: JacobianFn,
    ) -> Self {
        assert!(dim > 0, "system dimension must be positive");
        Self {
            name: name.into(),
            dim,
            params,
            eval,
            jacobian,
            manifold: None,
            phase_oracle: None,
        }
    }

    pub fn with_manifold(mut self, desc: ManifoldDescriptor) -> Self {
        self.manifold = Some(desc);
        self
    }

    pub fn with_phase_oracle(mut self, oracle: PhaseOracleFn) -> Self {
        self.phase_oracle = Some(oracle);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (self.eval)(x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (self.jacobian)(x)
    }

    pub fn manifold(&self) -> Option<&ManifoldDescriptor> {
        self.manifold.as_ref()
    }

    /// Closed-form asymptotic phase angles of a point, when the system ships one.
    pub fn phase_oracle(&self, x: &DVector<f64>) -> Option<Vec<f64>> {
        self.phase_oracle.as_ref().and_then(|f| f(x))
    }
}

/// Per-factor geometry of a product-of-circles invariant torus: the factor
/// occupies coordinates (2i, 2i+1) and its circle has radius one.
#[derive(Clone, Debug)]
pub struct CircleFactor {
    pub angular_speed: f64,
    pub shear: f64,
}

/// Description of the invariant manifold, rich enough to build charts and to
/// test membership.
#[derive(Clone)]
pub enum ManifoldDescriptor {
    LimitCycle {
        period: f64,
        seed: DVector<f64>,
    },
    TorusProduct {
        factors: Vec<CircleFactor>,
    },
    ParametricChart {
        dim: usize,
        map: ChartMapFn,
        tangent: ChartTangentFn,
        /// Chart coordinates of an ambient point near the manifold.
        locate: LocateFn,
        domain_radius: f64,
    },
}

impl fmt::Debug for ManifoldDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LimitCycle { period, seed } => f
                .debug_struct("LimitCycle")
                .field("period", period)
                .field("seed", seed)
                .finish(),
            Self::TorusProduct { factors } => f
                .debug_struct("TorusProduct")
                .field("factors", &factors.len())
                .finish(),
            Self::ParametricChart { dim, domain_radius, .. } => f
                .debug_struct("ParametricChart")
                .field("dim", dim)
                .field("domain_radius", domain_radius)
                .finish(),
        }
    }
}

impl ManifoldDescriptor {
    /// Intrinsic dimension m of the manifold.
    pub fn dim(&self) -> usize {
        match self {
            Self::LimitCycle { .. } => 1,
            Self::TorusProduct { factors } => factors.len(),
            Self::ParametricChart { dim, .. } => *dim,
        }
    }

    /// Orthonormal basis of the tangent space of the manifold at an
    /// on-manifold point.
    pub fn tangent_basis(&self, sys: &SystemSpec, xi: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Self::LimitCycle { .. } => {
                let v = sys.eval(xi);
                if v.norm() > 1e-14 {
                    DMatrix::from_columns(&[v.normalize()])
                } else {
                    DMatrix::zeros(xi.len(), 0)
                }
            }
            Self::TorusProduct { factors } => {
                let n = xi.len();
                let mut t = DMatrix::zeros(n, factors.len());
                for i in 0..factors.len() {
                    let (a, c) = (xi[2 * i], xi[2 * i + 1]);
                    let r = (a * a + c * c).sqrt().max(1e-14);
                    t[(2 * i, i)] = -c / r;
                    t[(2 * i + 1, i)] = a / r;
                }
                t
            }
            Self::ParametricChart { tangent, locate, .. } => {
                let q = locate(xi);
                crate::subspace::orthonormalize(&tangent(&q))
            }
        }
    }

    /// Angle coordinates of an on-manifold point for the circle-based
    /// descriptors (used by reports and oracles); `None` for generic charts.
    pub fn angles(&self, xi: &DVector<f64>) -> Option<Vec<f64>> {
        match self {
            Self::LimitCycle { .. } => None,
            Self::TorusProduct { factors } => {
                let mut out = Vec::with_capacity(factors.len());
                for i in 0..factors.len() {
                    out.push(xi[2 * i + 1].atan2(xi[2 * i]));
                }
                Some(out)
            }
            Self::ParametricChart { .. } => None,
        }
    }
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Planar system whose limit cycle r = 1 attracts every orbit but the origin,
/// yet no motion off the cycle has an asymptotic phase: the radial attraction
/// is only polynomial while the angular speed depends on the radius. Serves
/// as the negative test for the hyperbolicity detector.
///
/// Polar form: d(phi)/dt = 1 + r^2, dr/dt = r (1 - r^2)^3.
pub fn builtin_counterexample() -> SystemSpec {
    let eval: VectorFieldFn = Arc::new(|x: &DVector<f64>| {
        let (a, b) = (x[0], x[1]);
        let u = 1.0 - a * a - b * b;
        let s = 1.0 + a * a + b * b;
        DVector::from_vec(vec![a * u.powi(3) - b * s, a * s + b * u.powi(3)])
    });
    let jacobian: JacobianFn = Arc::new(|x: &DVector<f64>| {
        let (a, b) = (x[0], x[1]);
        let u = 1.0 - a * a - b * b;
        let u2 = u * u;
        let u3 = u2 * u;
        DMatrix::from_row_slice(
            2,
            2,
            &[
                u3 - 6.0 * a * a * u2 - 2.0 * a * b,
                -6.0 * a * b * u2 - (1.0 + a * a + b * b) - 2.0 * b * b,
                (1.0 + a * a + b * b) + 2.0 * a * a - 6.0 * a * b * u2,
                2.0 * a * b + u3 - 6.0 * b * b * u2,
            ],
        )
    });
    SystemSpec::new("counterexample", 2, params(&[]), eval, jacobian).with_manifold(
        ManifoldDescriptor::LimitCycle {
            period: std::f64::consts::PI,
            seed: DVector::from_vec(vec![1.0, 0.0]),
        },
    )
}

/// Planar system with an exponentially attracting limit cycle r = 1, normal
/// Floquet exponent -2 and shear parameter `b` coupling radius to angular
/// speed. Its asymptotic phase has the closed form phi0 - b ln(r0).
///
/// Polar form: d(phi)/dt = omega + b (1 - r^2), dr/dt = r (1 - r^2).
pub fn builtin_shear_cycle(omega: f64, b: f64) -> SystemSpec {
    assert!(omega > 0.0, "angular speed must be positive");
    let eval: VectorFieldFn = Arc::new(move |x: &DVector<f64>| {
        let (a, c) = (x[0], x[1]);
        let u = 1.0 - a * a - c * c;
        let w = omega + b * u;
        DVector::from_vec(vec![a * u - c * w, c * u + a * w])
    });
    let jacobian: JacobianFn = Arc::new(move |x: &DVector<f64>| {
        let (a, c) = (x[0], x[1]);
        let u = 1.0 - a * a - c * c;
        let w = omega + b * u;
        DMatrix::from_row_slice(
            2,
            2,
            &[
                u - 2.0 * a * a + 2.0 * b * a * c,
                -2.0 * a * c - w + 2.0 * b * c * c,
                -2.0 * a * c + w - 2.0 * b * a * a,
                u - 2.0 * c * c - 2.0 * b * a * c,
            ],
        )
    });
    let oracle: PhaseOracleFn = Arc::new(move |x: &DVector<f64>| {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        if r <= 0.0 {
            return None;
        }
        Some(vec![x[1].atan2(x[0]) - b * r.ln()])
    });
    SystemSpec::new(
        "shear_cycle",
        2,
        params(&[("omega", omega), ("b", b)]),
        eval,
        jacobian,
    )
    .with_manifold(ManifoldDescriptor::LimitCycle {
        period: 2.0 * std::f64::consts::PI / omega,
        seed: DVector::from_vec(vec![1.0, 0.0]),
    })
    .with_phase_oracle(oracle)
}

/// Product of shear cycles: an attracting invariant torus of dimension
/// `factors.len()` inside R^(2 len). The asymptotic phase factorizes.
pub fn builtin_torus_product(factors: &[(f64, f64)]) -> Result<SystemSpec> {
    if factors.len() < 2 {
        return Err(Error::InvalidArgument(
            "torus product needs at least 2 factors".into(),
        ));
    }
    for &(omega, _) in factors {
        if omega <= 0.0 {
            return Err(Error::InvalidArgument(
                "factor angular speeds must be positive".into(),
            ));
        }
    }
    let n = 2 * factors.len();
    let facs: Vec<(f64, f64)> = factors.to_vec();
    let facs_eval = facs.clone();
    let eval: VectorFieldFn = Arc::new(move |x: &DVector<f64>| {
        let mut v = DVector::zeros(x.len());
        for (i, &(omega, b)) in facs_eval.iter().enumerate() {
            let (a, c) = (x[2 * i], x[2 * i + 1]);
            let u = 1.0 - a * a - c * c;
            let w = omega + b * u;
            v[2 * i] = a * u - c * w;
            v[2 * i + 1] = c * u + a * w;
        }
        v
    });
    let facs_jac = facs.clone();
    let jacobian: JacobianFn = Arc::new(move |x: &DVector<f64>| {
        let n = x.len();
        let mut j = DMatrix::zeros(n, n);
        for (i, &(omega, b)) in facs_jac.iter().enumerate() {
            let (a, c) = (x[2 * i], x[2 * i + 1]);
            let u = 1.0 - a * a - c * c;
            let w = omega + b * u;
            j[(2 * i, 2 * i)] = u - 2.0 * a * a + 2.0 * b * a * c;
            j[(2 * i, 2 * i + 1)] = -2.0 * a * c - w + 2.0 * b * c * c;
            j[(2 * i + 1, 2 * i)] = -2.0 * a * c + w - 2.0 * b * a * a;
            j[(2 * i + 1, 2 * i + 1)] = u - 2.0 * c * c - 2.0 * b * a * c;
        }
        j
    });
    let facs_oracle = facs.clone();
    let oracle: PhaseOracleFn = Arc::new(move |x: &DVector<f64>| {
        let mut angles = Vec::with_capacity(facs_oracle.len());
        for (i, &(_, b)) in facs_oracle.iter().enumerate() {
            let (a, c) = (x[2 * i], x[2 * i + 1]);
            let r = (a * a + c * c).sqrt();
            if r <= 0.0 {
                return None;
            }
            angles.push(c.atan2(a) - b * r.ln());
        }
        Some(angles)
    });
    let mut pmap = BTreeMap::new();
    for (i, &(omega, b)) in facs.iter().enumerate() {
        pmap.insert(format!("omega{i}"), omega);
        pmap.insert(format!("b{i}"), b);
    }
    Ok(SystemSpec::new("torus_product", n, pmap, eval, jacobian)
        .with_manifold(ManifoldDescriptor::TorusProduct {
            factors: facs
                .iter()
                .map(|&(omega, b)| CircleFactor {
                    angular_speed: omega,
                    shear: b,
                })
                .collect(),
        })
        .with_phase_oracle(oracle))
}

/// Linear system dy/dt = blockdiag(-a I, mu I, 0) y whose cocycle is exactly
/// blockdiag(e^(-a t) I, e^(mu t) I, 1). The invariant manifold is the center
/// axis (last coordinate). Used for exact-solution tests.
pub fn builtin_linear_block(a: f64, mu: f64, n_minus: usize, n_plus: usize) -> Result<SystemSpec> {
    if a <= 0.0 {
        return Err(Error::InvalidArgument("stable rate a must be positive".into()));
    }
    let n = n_minus + n_plus + 1;
    let mut diag = DVector::zeros(n);
    for i in 0..n_minus {
        diag[i] = -a;
    }
    for i in 0..n_plus {
        diag[n_minus + i] = mu;
    }
    let d_eval = diag.clone();
    let eval: VectorFieldFn = Arc::new(move |x: &DVector<f64>| x.component_mul(&d_eval));
    let d_jac = diag.clone();
    let jacobian: JacobianFn =
        Arc::new(move |_x: &DVector<f64>| DMatrix::from_diagonal(&d_jac));

    let axis = n - 1;
    let map: ChartMapFn = Arc::new(move |q: &DVector<f64>| {
        let mut x = DVector::zeros(axis + 1);
        x[axis] = q[0];
        x
    });
    let tangent: ChartTangentFn = Arc::new(move |_q: &DVector<f64>| {
        let mut t = DMatrix::zeros(axis + 1, 1);
        t[(axis, 0)] = 1.0;
        t
    });
    let locate: LocateFn = Arc::new(move |x: &DVector<f64>| DVector::from_vec(vec![x[axis]]));

    Ok(SystemSpec::new(
        "linear_block",
        n,
        params(&[
            ("a", a),
            ("mu", mu),
            ("n_minus", n_minus as f64),
            ("n_plus", n_plus as f64),
        ]),
        eval,
        jacobian,
    )
    .with_manifold(ManifoldDescriptor::ParametricChart {
        dim: 1,
        map,
        tangent,
        locate,
        domain_radius: 10.0,
    }))
}

/// Look up a builtin by name with a parameter map (CLI entry point).
pub fn builtin_by_name(
    name: &str,
    params: &BTreeMap<String, f64>,
    factors: Option<&[(f64, f64)]>,
) -> Result<SystemSpec> {
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    match name {
        "counterexample" => Ok(builtin_counterexample()),
        "shear_cycle" => {
            let omega = get("omega", 1.0);
            if omega <= 0.0 {
                return Err(Error::InvalidArgument("omega must be positive".into()));
            }
            Ok(builtin_shear_cycle(omega, get("b", 0.0)))
        }
        "torus_product" => {
            let f = factors.ok_or_else(|| {
                Error::InvalidArgument("torus_product requires a factors list".into())
            })?;
            builtin_torus_product(f)
        }
        "linear_block" => builtin_linear_block(
            get("a", 2.0),
            get("mu", 1.0),
            get("n_minus", 1.0) as usize,
            get("n_plus", 0.0) as usize,
        ),
        other => Err(Error::InvalidArgument(format!("unknown system `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fd_jacobian(sys: &SystemSpec, x: &DVector<f64>) -> DMatrix<f64> {
        let n = sys.dim();
        let mut j = DMatrix::zeros(n, n);
        for col in 0..n {
            let h = 1e-6 * (1.0 + x[col].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let df = (sys.eval(&xp) - sys.eval(&xm)) / (2.0 * h);
            j.set_column(col, &df);
        }
        j
    }

    fn check_jacobian_consistency(sys: &SystemSpec, points: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..points {
            let x = DVector::from_fn(sys.dim(), |_, _| rng.gen_range(-1.4..1.4));
            let analytic = sys.jacobian(&x);
            let numeric = fd_jacobian(sys, &x);
            let scale = analytic.norm().max(1.0);
            assert!(
                (&analytic - &numeric).norm() / scale <= 1e-5,
                "jacobian mismatch for {} at {:?}",
                sys.name(),
                x
            );
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        check_jacobian_consistency(&builtin_counterexample(), 100, 1);
        check_jacobian_consistency(&builtin_shear_cycle(1.0, 1.0), 100, 2);
        check_jacobian_consistency(
            &builtin_torus_product(&[(1.0, 1.0), (2.0f64.sqrt(), 0.5)]).unwrap(),
            100,
            3,
        );
        check_jacobian_consistency(&builtin_linear_block(2.0, 1.0, 1, 1).unwrap(), 100, 4);
    }

    #[test]
    fn counterexample_velocity_on_cycle() {
        let sys = builtin_counterexample();
        let v = sys.eval(&DVector::from_vec(vec![1.0, 0.0]));
        assert_relative_eq!(v[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(v[1], 2.0, epsilon = 1e-14);
        let origin = sys.eval(&DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(origin.norm(), 0.0);
    }

    #[test]
    fn counterexample_radial_linearization_degenerates_on_cycle() {
        // d/dr [r (1-r^2)^3] = (1-r^2)^3 - 6 r^2 (1-r^2)^2 vanishes at r = 1;
        // in Cartesian terms the radial-radial entry of the Jacobian at (1, 0)
        // reduces to that derivative.
        let sys = builtin_counterexample();
        let j = sys.jacobian(&DVector::from_vec(vec![1.0, 0.0]));
        let radial = DVector::from_vec(vec![1.0, 0.0]);
        let radial_rate = radial.dot(&(j * &radial));
        assert_relative_eq!(radial_rate, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn shear_cycle_is_tangent_on_the_circle() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let x = DVector::from_vec(vec![phi.cos(), phi.sin()]);
            let v = sys.eval(&x);
            let radial = v.dot(&x);
            assert!(radial.abs() < 1e-14, "radial component {radial} at phi={phi}");
        }
    }

    #[test]
    fn shear_cycle_phase_oracle_matches_closed_form() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let x = DVector::from_vec(vec![0.8, 0.0]);
        let phase = sys.phase_oracle(&x).unwrap();
        assert_relative_eq!(phase[0], -(0.8f64.ln()), epsilon = 1e-15);

        let flat = builtin_shear_cycle(1.0, 0.0);
        let phase = flat.phase_oracle(&x).unwrap();
        assert_relative_eq!(phase[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn torus_product_oracle_and_geometry() {
        let sys = builtin_torus_product(&[(1.0, 1.0), (2.0f64.sqrt(), 0.5)]).unwrap();
        assert_eq!(sys.dim(), 4);
        // start (r1=0.9, phi1=0, r2=1.1, phi2=1)
        let x = DVector::from_vec(vec![0.9, 0.0, 1.1 * 1.0f64.cos(), 1.1 * 1.0f64.sin()]);
        let phase = sys.phase_oracle(&x).unwrap();
        assert_relative_eq!(phase[0], -(0.9f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(phase[1], 1.0 - 0.5 * 1.1f64.ln(), epsilon = 1e-12);

        // velocity at angles (0,0) on the torus has zero radial components
        let on_torus = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let v = sys.eval(&on_torus);
        assert_relative_eq!(v[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(v[2], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn torus_product_rejects_single_factor() {
        assert!(builtin_torus_product(&[(1.0, 0.0)]).is_err());
    }

    #[test]
    fn linear_block_field_is_diagonal() {
        let sys = builtin_linear_block(2.0, 1.0, 1, 1).unwrap();
        assert_eq!(sys.dim(), 3);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let v = sys.eval(&x);
        assert_relative_eq!(v[0], -2.0, epsilon = 1e-15);
        assert_relative_eq!(v[1], 2.0, epsilon = 1e-15);
        assert_relative_eq!(v[2], 0.0, epsilon = 1e-15);
        // stable-block contraction factor over t=1 is e^{-2}
        assert_relative_eq!((-2.0f64).exp(), 0.1353352832366127, epsilon = 1e-15);
    }

    #[test]
    fn builtin_lookup_rejects_unknown_names() {
        let err = builtin_by_name("no_such_system", &BTreeMap::new(), None);
        assert!(err.is_err());
    }

    #[test]
    fn evaluations_are_bitwise_deterministic() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let x = DVector::from_vec(vec![0.73, -0.41]);
        let a = sys.eval(&x);
        let b = sys.eval(&x);
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
