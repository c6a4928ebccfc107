//! Hyperbolic splitting along the invariant manifold: stable / unstable /
//! neutral bases, the associated projections, and the quantitative constants
//! of the contraction argument.

use std::collections::BTreeMap;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{self, CocycleCache, IntegratorConfig};
use crate::sampling;
use crate::subspace;
use crate::systems::{ManifoldDescriptor, SystemSpec};

/// Non-unit multipliers closer than this to the unit circle fail the
/// hyperbolicity test.
pub const UNIT_MULTIPLIER_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SplittingConfig {
    /// Finite-time exponents inside (-band, band) are classified as neutral.
    pub neutral_band: f64,
    /// Forward/backward dichotomy horizon for the non-periodic route.
    pub horizon: f64,
    pub integ: IntegratorConfig,
}

impl Default for SplittingConfig {
    fn default() -> Self {
        Self {
            neutral_band: 0.1,
            horizon: 8.0,
            integ: IntegratorConfig::default(),
        }
    }
}

/// Bases and projections of the splitting at one point of the manifold.
///
/// The neutral basis always contains the flow direction when the field does
/// not vanish; for quasi-periodic manifolds it may have dimension > 1, in
/// which case the graph correction simply lands in the larger neutral space.
#[derive(Debug, Clone)]
pub struct SplittingFrame {
    pub point: DVector<f64>,
    pub basis_minus: DMatrix<f64>,
    pub basis_plus: DMatrix<f64>,
    pub basis_zero: DMatrix<f64>,
    pub proj_minus: DMatrix<f64>,
    pub proj_plus: DMatrix<f64>,
    pub proj_zero: DMatrix<f64>,
    /// Basis of the tangent-stable intersection (empty for all builtins).
    pub k_minus: DMatrix<f64>,
    /// Complement of `k_minus` inside the stable space; the normal-like
    /// directions of the tubular neighborhood.
    pub j_minus: DMatrix<f64>,
    /// Set when the stable bundle around a cycle is non-orientable (negative
    /// leading multiplier); charts must then stay within half a period.
    pub orientation_flip: bool,
}

impl SplittingFrame {
    pub fn dim(&self) -> usize {
        self.point.len()
    }

    pub fn n_minus(&self) -> usize {
        self.basis_minus.ncols()
    }

    pub fn n_plus(&self) -> usize {
        self.basis_plus.ncols()
    }

    pub fn n_zero(&self) -> usize {
        self.basis_zero.ncols()
    }

    pub fn proj_plus_zero(&self) -> DMatrix<f64> {
        &self.proj_plus + &self.proj_zero
    }

    pub(crate) fn from_bases(
        point: DVector<f64>,
        basis_minus: DMatrix<f64>,
        basis_plus: DMatrix<f64>,
        basis_zero: DMatrix<f64>,
        tangent: &DMatrix<f64>,
        orientation_flip: bool,
    ) -> Result<Self> {
        let n = point.len();
        let n_minus = basis_minus.ncols();
        let n_plus = basis_plus.ncols();
        let n_zero = basis_zero.ncols();
        if n_minus + n_plus + n_zero != n {
            return Err(Error::NonHyperbolic {
                reason: format!(
                    "subspace dimensions {n_minus}+{n_plus}+{n_zero} do not fill R^{n}"
                ),
            });
        }
        let mut full = DMatrix::zeros(n, n);
        full.columns_mut(0, n_minus).copy_from(&basis_minus);
        full.columns_mut(n_minus, n_plus).copy_from(&basis_plus);
        full.columns_mut(n_minus + n_plus, n_zero).copy_from(&basis_zero);
        let inv = full.clone().lu().try_inverse().ok_or(Error::NonHyperbolic {
            reason: "splitting bases are numerically degenerate".into(),
        })?;
        let dual_minus = inv.rows(0, n_minus).clone_owned();
        let dual_plus = inv.rows(n_minus, n_plus).clone_owned();
        let dual_zero = inv.rows(n_minus + n_plus, n_zero).clone_owned();
        let proj_minus = &basis_minus * dual_minus;
        let proj_plus = &basis_plus * dual_plus;
        let proj_zero = &basis_zero * dual_zero;

        let k_minus = subspace::intersection(tangent, &basis_minus, 1e-8);
        let j_minus = if k_minus.ncols() == 0 {
            basis_minus.clone()
        } else {
            subspace::complement_within(&basis_minus, &k_minus)
        };

        Ok(Self {
            point,
            basis_minus,
            basis_plus,
            basis_zero,
            proj_minus,
            proj_plus,
            proj_zero,
            k_minus,
            j_minus,
            orientation_flip,
        })
    }
}

fn cluster_eigenvalues(eigs: &[Complex<f64>], tol: f64) -> Vec<Vec<Complex<f64>>> {
    let mut sorted: Vec<Complex<f64>> = eigs.to_vec();
    sorted.sort_by(|a, b| {
        (a.re, a.im)
            .partial_cmp(&(b.re, b.im))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut clusters: Vec<Vec<Complex<f64>>> = Vec::new();
    for z in sorted {
        // Conjugates always share a cluster so the invariant subspace is real.
        let mut placed = false;
        for c in clusters.iter_mut() {
            if c.iter()
                .any(|w| (w - z).norm() < tol || (w.conj() - z).norm() < tol)
            {
                c.push(z);
                placed = true;
                break;
            }
        }
        if !placed {
            clusters.push(vec![z]);
        }
    }
    clusters
}

/// Real invariant subspace of `m` for an eigenvalue cluster, by shifted
/// inverse iteration.
fn invariant_subspace(m: &DMatrix<f64>, cluster: &[Complex<f64>]) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let dim: usize = cluster.len();
    let center = cluster.iter().sum::<Complex<f64>>() / Complex::new(cluster.len() as f64, 0.0);
    let scale = subspace::operator_norm(m).max(1.0);
    let shift = 1e-8 * scale;
    let target: DMatrix<f64> = if center.im.abs() < 1e-10 * scale {
        m - DMatrix::identity(n, n) * (center.re + shift)
    } else {
        // Real quadratic form annihilating the conjugate pair.
        let t = m - DMatrix::identity(n, n) * center.re;
        &t * &t + DMatrix::identity(n, n) * (center.im * center.im + shift * shift)
    };
    let lu = target.lu();
    let mut basis = DMatrix::from_fn(n, dim, |i, j| sampling::unit_direction(j as u64, 17, n)[i]);
    basis = subspace::orthonormalize(&basis);
    for _ in 0..6 {
        let next = lu.solve(&basis).ok_or(Error::NonHyperbolic {
            reason: "inverse iteration hit a singular shift".into(),
        })?;
        let next = subspace::orthonormalize(&next);
        if next.ncols() != dim {
            return Err(Error::NonHyperbolic {
                reason: "invariant subspace collapsed during inverse iteration".into(),
            });
        }
        let angle = subspace::max_principal_angle(&basis, &next);
        basis = next;
        if angle < 1e-14 {
            break;
        }
    }
    Ok(basis)
}

/// Classify a monodromy matrix into stable/unstable bases plus the flow
/// direction. `v` must be the (non-zero) field at the base point.
pub(crate) fn classify_from_monodromy(
    point: &DVector<f64>,
    monodromy: &DMatrix<f64>,
    v: &DVector<f64>,
    tangent: &DMatrix<f64>,
) -> Result<SplittingFrame> {
    let n = monodromy.nrows();
    let eigs: Vec<Complex<f64>> = monodromy.complex_eigenvalues().iter().copied().collect();

    let near_unit: Vec<Complex<f64>> = eigs
        .iter()
        .copied()
        .filter(|z| (z.norm() - 1.0).abs() < UNIT_MULTIPLIER_TOL)
        .collect();
    if near_unit.len() > 1 {
        let listed: Vec<String> = near_unit.iter().map(|z| format!("{z:.6}")).collect();
        return Err(Error::NonHyperbolic {
            reason: format!(
                "monodromy has {} multipliers on the unit circle ({}); the normal linearization is degenerate",
                near_unit.len(),
                listed.join(", ")
            ),
        });
    }
    if near_unit.is_empty() {
        return Err(Error::NonHyperbolic {
            reason: "no unit multiplier found; base point is not on a periodic orbit".into(),
        });
    }
    let unit = near_unit[0];
    if unit.im.abs() > UNIT_MULTIPLIER_TOL || (unit.re - 1.0).abs() > UNIT_MULTIPLIER_TOL {
        return Err(Error::NonHyperbolic {
            reason: format!("unit-circle multiplier {unit:.6} is not the trivial multiplier 1"),
        });
    }
    // Alignment check: the trivial multiplier must carry the flow direction.
    let v_hat = v / v.norm();
    let transported = monodromy * &v_hat;
    if (&transported - &v_hat).norm() > 1e-4 {
        return Err(Error::NonHyperbolic {
            reason: format!(
                "flow direction is not fixed by the monodromy (residual {:.3e})",
                (transported - &v_hat).norm()
            ),
        });
    }

    let rest: Vec<Complex<f64>> = eigs
        .iter()
        .copied()
        .filter(|z| (z.norm() - 1.0).abs() >= UNIT_MULTIPLIER_TOL)
        .collect();
    let stable: Vec<Complex<f64>> = rest.iter().copied().filter(|z| z.norm() < 1.0).collect();
    let unstable: Vec<Complex<f64>> = rest.iter().copied().filter(|z| z.norm() > 1.0).collect();

    let mut orientation_flip = false;
    let mut basis_minus_cols: Vec<DVector<f64>> = Vec::new();
    for cluster in cluster_eigenvalues(&stable, 1e-6) {
        if cluster.iter().any(|z| z.im.abs() < 1e-10 && z.re < 0.0) {
            orientation_flip = true;
        }
        let b = invariant_subspace(monodromy, &cluster)?;
        for j in 0..b.ncols() {
            basis_minus_cols.push(b.column(j).clone_owned());
        }
    }
    let mut basis_plus_cols: Vec<DVector<f64>> = Vec::new();
    for cluster in cluster_eigenvalues(&unstable, 1e-6) {
        let b = invariant_subspace(monodromy, &cluster)?;
        for j in 0..b.ncols() {
            basis_plus_cols.push(b.column(j).clone_owned());
        }
    }

    let basis_minus = if basis_minus_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        subspace::orthonormalize(&DMatrix::from_columns(&basis_minus_cols))
    };
    let basis_plus = if basis_plus_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        subspace::orthonormalize(&DMatrix::from_columns(&basis_plus_cols))
    };
    let basis_zero = DMatrix::from_columns(&[v_hat]);

    SplittingFrame::from_bases(
        point.clone(),
        basis_minus,
        basis_plus,
        basis_zero,
        tangent,
        orientation_flip,
    )
}

/// Classify from finite-time dichotomy windows: `fwd` propagates the base
/// point forward by `t_f`; `bwd_product` propagates the backward pre-image
/// forward into the base point over `t_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn classify_from_windows(
    point: &DVector<f64>,
    fwd: &DMatrix<f64>,
    t_f: f64,
    bwd_product: &DMatrix<f64>,
    t_b: f64,
    v: &DVector<f64>,
    tangent: &DMatrix<f64>,
    band: f64,
) -> Result<SplittingFrame> {
    let n = fwd.nrows();

    // Stable directions: most-contracted right singular vectors of the
    // forward window.
    let svd_f = fwd.clone().svd(false, true);
    let v_t = svd_f.v_t.as_ref().expect("svd v_t");
    let mut stable_cols: Vec<DVector<f64>> = Vec::new();
    let mut worst_stable_exp: f64 = f64::NEG_INFINITY;
    for (i, &sigma) in svd_f.singular_values.iter().enumerate() {
        let exp = sigma.max(1e-300).ln() / t_f;
        if exp < -band {
            stable_cols.push(v_t.row(i).transpose());
            worst_stable_exp = worst_stable_exp.max(exp);
        }
    }
    if !stable_cols.is_empty() {
        let resolved = (worst_stable_exp * t_f).exp();
        if resolved >= 1e-6 {
            return Err(Error::HorizonTooShort {
                decay: resolved,
                required: 1e-6,
            });
        }
    }

    // Unstable and neutral directions from the backward window: its left
    // singular vectors live at the base point, and their exponents over t_b
    // separate what grew into the point from what merely persisted.
    let svd_b = bwd_product.clone().svd(true, false);
    let u = svd_b.u.as_ref().expect("svd u");
    let mut unstable_cols: Vec<DVector<f64>> = Vec::new();
    let mut neutral_cols: Vec<DVector<f64>> = Vec::new();
    for (i, &sigma) in svd_b.singular_values.iter().enumerate() {
        let exp = sigma.max(1e-300).ln() / t_b;
        if exp > band {
            unstable_cols.push(u.column(i).clone_owned());
        } else if exp > -band {
            neutral_cols.push(u.column(i).clone_owned());
        }
    }

    let n_minus = stable_cols.len();
    let n_plus = unstable_cols.len();
    let n_zero = neutral_cols.len();
    if n_minus + n_plus + n_zero != n {
        return Err(Error::NonHyperbolic {
            reason: format!(
                "spectral gap test failed: forward window sees {n_minus} stable directions, backward window sees {n_plus} unstable and {n_zero} neutral in R^{n}"
            ),
        });
    }

    let basis_minus = if stable_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        subspace::orthonormalize(&DMatrix::from_columns(&stable_cols))
    };
    let basis_plus = if unstable_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        subspace::orthonormalize(&DMatrix::from_columns(&unstable_cols))
    };
    let mut basis_zero = if neutral_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        subspace::orthonormalize(&DMatrix::from_columns(&neutral_cols))
    };

    // The flow direction is neutral; pin it exactly when the field is nonzero.
    if v.norm() > 1e-12 {
        if basis_zero.ncols() == 0 {
            return Err(Error::NonHyperbolic {
                reason: "no neutral direction found although the field is non-zero".into(),
            });
        }
        let v_hat = v / v.norm();
        let proj = &basis_zero * (basis_zero.transpose() * &v_hat);
        if proj.norm() < 1e-6 {
            return Err(Error::NonHyperbolic {
                reason: "flow direction is orthogonal to the neutral subspace".into(),
            });
        }
        let angle = (v_hat.dot(&proj.normalize())).clamp(-1.0, 1.0).acos();
        if angle > 1e-3 {
            return Err(Error::NonHyperbolic {
                reason: format!(
                    "flow direction deviates from the neutral subspace by {angle:.3e} rad"
                ),
            });
        }
        let mut seeded = DMatrix::zeros(n, basis_zero.ncols() + 1);
        seeded.columns_mut(0, 1).copy_from(&DMatrix::from_columns(&[v_hat]));
        seeded
            .columns_mut(1, basis_zero.ncols())
            .copy_from(&basis_zero);
        let reduced = subspace::orthonormalize(&seeded);
        basis_zero = reduced.columns(0, n_zero).clone_owned();
    }

    SplittingFrame::from_bases(
        point.clone(),
        basis_minus,
        basis_plus,
        basis_zero,
        tangent,
        false,
    )
}

/// How per-node frames are produced from cached interval propagators when a
/// solver needs the splitting along a whole trajectory.
#[derive(Debug, Clone, Copy)]
pub enum FrameRecipe {
    /// Compose one period of interval propagators and classify the monodromy.
    Monodromy { period: f64 },
    /// Compose forward/backward dichotomy windows and classify the products.
    Windows { horizon: f64 },
}

/// Provider of splitting frames at arbitrary manifold points.
pub trait SplittingSource: Send + Sync {
    fn splitting_at(&self, xi: &DVector<f64>) -> Result<SplittingFrame>;
    fn system(&self) -> &SystemSpec;
    fn descriptor(&self) -> &ManifoldDescriptor;
    fn config(&self) -> &SplittingConfig;
    fn frame_recipe(&self) -> FrameRecipe;
    /// True when charts must be restricted to half a period (stable bundle
    /// holonomy flip around the cycle).
    fn orientation_flip(&self) -> bool {
        false
    }
}

/// Classify a frame from lattice products according to a recipe; used by
/// kernel builders that cache interval propagators.
#[allow(clippy::too_many_arguments)]
pub fn classify_frame(
    recipe: FrameRecipe,
    point: &DVector<f64>,
    forward_product: &DMatrix<f64>,
    forward_span: f64,
    backward_product: Option<&DMatrix<f64>>,
    backward_span: f64,
    v: &DVector<f64>,
    tangent: &DMatrix<f64>,
    band: f64,
) -> Result<SplittingFrame> {
    match recipe {
        FrameRecipe::Monodromy { .. } => classify_from_monodromy(point, forward_product, v, tangent),
        FrameRecipe::Windows { .. } => {
            let bwd = backward_product.ok_or_else(|| {
                Error::InvalidArgument("window classification needs a backward product".into())
            })?;
            classify_from_windows(
                point,
                forward_product,
                forward_span,
                bwd,
                backward_span,
                v,
                tangent,
                band,
            )
        }
    }
}

/// Splitting via eigendecomposition of the monodromy matrix; the route for
/// limit cycles.
pub struct PeriodicSource {
    sys: SystemSpec,
    desc: ManifoldDescriptor,
    period: f64,
    cfg: SplittingConfig,
    orientation_flip: bool,
}

impl PeriodicSource {
    pub fn new(sys: SystemSpec, cfg: SplittingConfig) -> Result<Self> {
        let desc = sys
            .manifold()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("system has no manifold descriptor".into()))?;
        let (period, seed) = match &desc {
            ManifoldDescriptor::LimitCycle { period, seed } => (*period, seed.clone()),
            _ => {
                return Err(Error::InvalidArgument(
                    "periodic splitting requires a limit-cycle descriptor".into(),
                ))
            }
        };
        let mut source = Self {
            sys,
            desc,
            period,
            cfg,
            orientation_flip: false,
        };
        // Probe the seed once: surfaces NonHyperbolic early and records the
        // stable-bundle holonomy.
        let frame = source.splitting_at(&seed)?;
        source.orientation_flip = frame.orientation_flip;
        Ok(source)
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Monodromy matrix of the cycle at `xi`.
    pub fn monodromy(&self, xi: &DVector<f64>) -> Result<DMatrix<f64>> {
        let cache = flow::variational(&self.sys, xi, (0.0, self.period), &self.cfg.integ)?;
        cache.matrix_at(self.period)
    }
}

impl SplittingSource for PeriodicSource {
    fn splitting_at(&self, xi: &DVector<f64>) -> Result<SplittingFrame> {
        let v = self.sys.eval(xi);
        if v.norm() < 1e-12 {
            return Err(Error::InvalidArgument(
                "field vanishes at the base point of a periodic orbit".into(),
            ));
        }
        let monodromy = self.monodromy(xi)?;
        let tangent = self.desc.tangent_basis(&self.sys, xi);
        classify_from_monodromy(xi, &monodromy, &v, &tangent)
    }

    fn system(&self) -> &SystemSpec {
        &self.sys
    }

    fn descriptor(&self) -> &ManifoldDescriptor {
        &self.desc
    }

    fn config(&self) -> &SplittingConfig {
        &self.cfg
    }

    fn frame_recipe(&self) -> FrameRecipe {
        FrameRecipe::Monodromy {
            period: self.period,
        }
    }

    fn orientation_flip(&self) -> bool {
        self.orientation_flip
    }
}

/// Splitting via finite-time dichotomy windows; the route for tori and
/// parametric manifolds.
pub struct GeneralSource {
    sys: SystemSpec,
    desc: ManifoldDescriptor,
    cfg: SplittingConfig,
}

impl GeneralSource {
    pub fn new(sys: SystemSpec, cfg: SplittingConfig) -> Result<Self> {
        let desc = sys
            .manifold()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("system has no manifold descriptor".into()))?;
        Ok(Self { sys, desc, cfg })
    }
}

impl SplittingSource for GeneralSource {
    fn splitting_at(&self, xi: &DVector<f64>) -> Result<SplittingFrame> {
        let t_f = self.cfg.horizon;
        let t_b = self.cfg.horizon;
        let fwd_cache = flow::variational(&self.sys, xi, (0.0, t_f), &self.cfg.integ)?;
        let fwd = fwd_cache.matrix_at(t_f)?;
        // Backward window: fly to the pre-image, then propagate forward into xi.
        let pre = flow::flow_to(&self.sys, xi, -t_b, &self.cfg.integ)?;
        let (_, bwd_product) = flow::interval_propagator(&self.sys, &pre, t_b, &self.cfg.integ)?;
        let v = self.sys.eval(xi);
        let tangent = self.desc.tangent_basis(&self.sys, xi);
        classify_from_windows(
            xi,
            &fwd,
            t_f,
            &bwd_product,
            t_b,
            &v,
            &tangent,
            self.cfg.neutral_band,
        )
    }

    fn system(&self) -> &SystemSpec {
        &self.sys
    }

    fn descriptor(&self) -> &ManifoldDescriptor {
        &self.desc
    }

    fn config(&self) -> &SplittingConfig {
        &self.cfg
    }

    fn frame_recipe(&self) -> FrameRecipe {
        FrameRecipe::Windows {
            horizon: self.cfg.horizon,
        }
    }
}

/// Route selection: monodromy eigenstructure for limit cycles, dichotomy
/// windows otherwise.
pub fn source_for(sys: &SystemSpec, cfg: SplittingConfig) -> Result<Box<dyn SplittingSource>> {
    match sys.manifold() {
        Some(ManifoldDescriptor::LimitCycle { .. }) => {
            Ok(Box::new(PeriodicSource::new(sys.clone(), cfg)?))
        }
        Some(_) => Ok(Box::new(GeneralSource::new(sys.clone(), cfg)?)),
        None => Err(Error::InvalidArgument(
            "system has no manifold descriptor".into(),
        )),
    }
}

/// Splitting at a point of a limit cycle (monodromy route).
pub fn splitting_periodic(
    sys: &SystemSpec,
    xi: &DVector<f64>,
    cfg: &SplittingConfig,
) -> Result<SplittingFrame> {
    let source = PeriodicSource::new(sys.clone(), cfg.clone())?;
    source.splitting_at(xi)
}

/// Splitting at a manifold point via finite-time dichotomy windows.
pub fn splitting_general(
    sys: &SystemSpec,
    xi: &DVector<f64>,
    horizon: f64,
    cfg: &SplittingConfig,
) -> Result<SplittingFrame> {
    let mut cfg = cfg.clone();
    cfg.horizon = horizon;
    let source = GeneralSource::new(sys.clone(), cfg)?;
    source.splitting_at(xi)
}

/// Push a frame along the flow: transported bases are renormalized and the
/// projections rebuilt from them.
pub fn transport(frame: &SplittingFrame, cache: &CocycleCache, t: f64) -> Result<SplittingFrame> {
    let xt = cache.matrix_at(t)?;
    let point = cache.state_at(t);
    let transported = |basis: &DMatrix<f64>| -> DMatrix<f64> {
        if basis.ncols() == 0 {
            basis.clone()
        } else {
            subspace::orthonormalize(&(&xt * basis))
        }
    };
    let basis_minus = transported(&frame.basis_minus);
    let basis_plus = transported(&frame.basis_plus);
    let basis_zero = transported(&frame.basis_zero);
    let sys = cache.system();
    let tangent = match sys.manifold() {
        Some(desc) => desc.tangent_basis(sys, &point),
        None => {
            let v = sys.eval(&point);
            if v.norm() > 1e-12 {
                DMatrix::from_columns(&[v.normalize()])
            } else {
                DMatrix::zeros(point.len(), 0)
            }
        }
    };
    SplittingFrame::from_bases(
        point,
        basis_minus,
        basis_plus,
        basis_zero,
        &tangent,
        frame.orientation_flip,
    )
}

/// Field provenance for the estimated constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Estimated,
    UserSupplied,
}

/// The quantitative constants of the hyperbolic estimates with the
/// admissibility conditions on the neighborhood radii.
#[derive(Debug, Clone)]
pub struct HyperbolicConstants {
    /// Overshoot constant of the exponential estimates (>= 1).
    pub c: f64,
    /// Decay rate of the stable directions.
    pub alpha: f64,
    /// Projector-norm constant: c times the largest projection norm.
    pub k_proj: f64,
    /// Lipschitz constant of the Jacobian over the tube; bounds the second
    /// derivative of the nonlinear remainder.
    pub c_lip: f64,
    /// Quadratic-defect constant, measured a posteriori from solved fibers.
    pub c0_measured: Option<f64>,
    /// Radius of the stable-offset ball.
    pub r: f64,
    /// Decay-envelope prefactor.
    pub big_r: f64,
    /// Contraction factor 11 K C R / (6 alpha).
    pub kappa: f64,
    pub provenance: BTreeMap<String, Provenance>,
    pub shrink_steps: usize,
}

impl HyperbolicConstants {
    pub fn kappa_of(&self, big_r: f64) -> f64 {
        11.0 * self.k_proj * self.c_lip * big_r / (6.0 * self.alpha)
    }

    /// cr + (11 / 12 alpha) K C R^2 <= R
    pub fn radii_admissible_weak(&self) -> bool {
        self.c * self.r
            + 11.0 / (12.0 * self.alpha) * self.k_proj * self.c_lip * self.big_r * self.big_r
            <= self.big_r + 1e-15
    }

    /// cr + (11 / 6 alpha) K C R^2 <= R
    pub fn radii_admissible_strong(&self) -> bool {
        self.c * self.r
            + 11.0 / (6.0 * self.alpha) * self.k_proj * self.c_lip * self.big_r * self.big_r
            <= self.big_r + 1e-15
    }

    /// 11 K C R / (3 alpha) < 1, the derivative-space contraction condition.
    pub fn derivative_contraction_holds(&self) -> bool {
        11.0 * self.k_proj * self.c_lip * self.big_r / (3.0 * self.alpha) < 1.0
    }

    pub fn contraction_holds(&self) -> bool {
        self.kappa < 1.0
    }

    pub fn is_admissible(&self) -> bool {
        self.radii_admissible_weak() && self.radii_admissible_strong() && self.contraction_holds()
    }

    /// Override a field from user configuration, marking its provenance.
    pub fn override_field(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "c" => self.c = value,
            "alpha" => self.alpha = value,
            "k_proj" => self.k_proj = value,
            "c_lip" => self.c_lip = value,
            "r" => self.r = value,
            "big_r" => self.big_r = value,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown constants field `{other}`"
                )))
            }
        }
        self.kappa = self.kappa_of(self.big_r);
        self.provenance
            .insert(name.to_string(), Provenance::UserSupplied);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConstantsConfig {
    /// Number of manifold sample points.
    pub samples: usize,
    /// Window over which finite-time decay exponents are measured.
    pub decay_window: f64,
    /// Tube radius over which the Jacobian Lipschitz constant is sampled.
    pub tube_radius: f64,
    /// Offsets per manifold point for the Lipschitz sampling.
    pub offsets_per_point: usize,
    /// Fraction shaved off the worst observed decay exponent.
    pub safety_margin: f64,
    pub alpha_floor: f64,
    pub max_shrink: usize,
    /// Halton offset so a seed can pick a different deterministic sample set.
    pub seed: u64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            decay_window: 5.0,
            tube_radius: 0.35,
            offsets_per_point: 24,
            safety_margin: 0.05,
            alpha_floor: 1e-6,
            max_shrink: 20,
            seed: 0,
        }
    }
}

/// Deterministic points on the manifold for sampling-based estimates.
pub fn sample_manifold_points(
    sys: &SystemSpec,
    desc: &ManifoldDescriptor,
    count: usize,
    integ: &IntegratorConfig,
) -> Result<Vec<DVector<f64>>> {
    match desc {
        ManifoldDescriptor::LimitCycle { period, seed } => {
            let seg = flow::integrate(sys, seed, (0.0, *period), integ)?;
            Ok((0..count)
                .map(|k| seg.eval(*period * k as f64 / count as f64))
                .collect())
        }
        ManifoldDescriptor::TorusProduct { factors } => {
            let m = factors.len();
            Ok((0..count)
                .map(|k| {
                    let h = sampling::halton(k as u64, 0, m);
                    let mut x = DVector::zeros(2 * m);
                    for (i, &u) in h.iter().enumerate() {
                        let angle = std::f64::consts::TAU * u;
                        x[2 * i] = angle.cos();
                        x[2 * i + 1] = angle.sin();
                    }
                    x
                })
                .collect())
        }
        ManifoldDescriptor::ParametricChart {
            dim,
            map,
            domain_radius,
            ..
        } => Ok((0..count)
            .map(|k| {
                let h = sampling::halton(k as u64, 0, *dim);
                let q = DVector::from_fn(*dim, |i, _| (2.0 * h[i] - 1.0) * 0.5 * domain_radius);
                map(&q)
            })
            .collect()),
    }
}

/// Estimate the hyperbolic constants by sampling decay exponents, projector
/// norms and the Jacobian Lipschitz constant, then shrink (r, R) until the
/// admissibility conditions hold.
pub fn estimate_constants(
    source: &dyn SplittingSource,
    r_init: f64,
    big_r_init: f64,
    cfg: &ConstantsConfig,
) -> Result<HyperbolicConstants> {
    let sys = source.system();
    let desc = source.descriptor();
    let integ = &source.config().integ;
    let wrap = |e: Error| match e {
        Error::NonHyperbolic { reason } => Error::ConstantsInfeasible {
            attempts: 0,
            reason,
        },
        other => other,
    };

    let points = sample_manifold_points(sys, desc, cfg.samples.max(2), integ)?;
    let mut frames = Vec::with_capacity(points.len());
    for p in &points {
        frames.push(source.splitting_at(p).map_err(wrap)?);
    }

    // Decay exponents along the stable directions plus transported norms for
    // the overshoot constant.
    let window = cfg.decay_window;
    let t_probe: Vec<f64> = (1..=10).map(|k| window * k as f64 / 10.0).collect();
    let mut alpha_raw = f64::INFINITY;
    let mut max_proj_norm: f64 = 0.0;
    let mut decay_norms: Vec<Vec<f64>> = Vec::new();
    let mut zero_ratios: Vec<f64> = Vec::new();

    for (p, frame) in points.iter().zip(frames.iter()) {
        max_proj_norm = max_proj_norm
            .max(subspace::operator_norm(&frame.proj_minus))
            .max(subspace::operator_norm(&frame.proj_plus))
            .max(subspace::operator_norm(&frame.proj_zero));

        let cache = flow::variational(sys, p, (0.0, window), integ)?;
        for j in 0..frame.n_minus() {
            let eta = frame.basis_minus.column(j).clone_owned();
            let mut norms = Vec::with_capacity(t_probe.len());
            for &t in &t_probe {
                let xt = cache.matrix_at(t)?;
                norms.push((xt * &eta).norm());
            }
            alpha_raw = alpha_raw.min(-(norms.last().unwrap().max(1e-300)).ln() / window);
            decay_norms.push(norms);
        }

        let need_backward = frame.n_plus() > 0 || sys.eval(p).norm() > 1e-12;
        if need_backward {
            let back = flow::variational(sys, p, (0.0, -window), integ)?;
            let v = sys.eval(p);
            if v.norm() > 1e-12 {
                for &t in &t_probe {
                    zero_ratios.push((cache.matrix_at(t)? * &v).norm() / v.norm());
                    zero_ratios.push((back.matrix_at(-t)? * &v).norm() / v.norm());
                }
            }
            for j in 0..frame.n_plus() {
                let eta = frame.basis_plus.column(j).clone_owned();
                let mut norms = Vec::with_capacity(t_probe.len());
                for &t in &t_probe {
                    norms.push((back.matrix_at(-t)? * &eta).norm());
                }
                alpha_raw = alpha_raw.min(-(norms.last().unwrap().max(1e-300)).ln() / window);
                decay_norms.push(norms);
            }
        }
    }

    if !alpha_raw.is_finite() || alpha_raw <= cfg.alpha_floor {
        return Err(Error::ConstantsInfeasible {
            attempts: 0,
            reason: format!(
                "decay exponent estimate {alpha_raw:.3e} is not bounded away from zero"
            ),
        });
    }
    let alpha = alpha_raw * (1.0 - cfg.safety_margin);

    // c: smallest constant making the exponential bounds hold on the probe
    // grid across stable, unstable (backward) and neutral directions.
    let mut c: f64 = 1.0;
    for norms in &decay_norms {
        for (&t, &nrm) in t_probe.iter().zip(norms.iter()) {
            c = c.max(nrm * (alpha * t).exp());
        }
    }
    for &ratio in &zero_ratios {
        c = c.max(ratio);
    }

    let k_proj = c * max_proj_norm;

    // Jacobian Lipschitz constant over the tube.
    let n = sys.dim();
    let mut c_lip: f64 = 0.0;
    for (pi, p) in points.iter().enumerate() {
        let j_base = sys.jacobian(p);
        for k in 0..cfg.offsets_per_point {
            let idx = (pi * cfg.offsets_per_point + k) as u64;
            let dir = sampling::unit_direction(idx, cfg.seed, n);
            let radius = cfg.tube_radius * sampling::halton(idx, cfg.seed + 101, 1)[0].max(0.05);
            let y = DVector::from_vec(dir) * radius;
            let j_off = sys.jacobian(&(p + &y));
            c_lip = c_lip.max(subspace::operator_norm(&(j_off - &j_base)) / radius);
        }
    }

    // Shrink (r, R) geometrically until the admissibility conditions hold.
    let mut r = r_init.clamp(1e-12, 0.999);
    let mut big_r = big_r_init.clamp(1e-12, 0.999);
    let mut provenance = BTreeMap::new();
    for key in ["c", "alpha", "k_proj", "c_lip", "r", "big_r"] {
        provenance.insert(key.to_string(), Provenance::Estimated);
    }
    let mut shrink_steps = 0usize;
    loop {
        let candidate = HyperbolicConstants {
            c,
            alpha,
            k_proj,
            c_lip,
            c0_measured: None,
            r,
            big_r,
            kappa: 11.0 * k_proj * c_lip * big_r / (6.0 * alpha),
            provenance: provenance.clone(),
            shrink_steps,
        };
        if candidate.is_admissible() {
            return Ok(candidate);
        }
        if shrink_steps >= cfg.max_shrink {
            return Err(Error::ConstantsInfeasible {
                attempts: shrink_steps,
                reason: format!(
                    "kappa = {:.3e} or radii (r={r:.3e}, R={big_r:.3e}) remain inadmissible (c={c:.3}, alpha={alpha:.3}, K={k_proj:.3}, C={c_lip:.3})",
                    candidate.kappa
                ),
            });
        }
        if candidate.kappa >= 0.95 {
            big_r *= 0.5;
            r = r.min(big_r);
        } else {
            r *= 0.5;
        }
        shrink_steps += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{
        builtin_counterexample, builtin_linear_block, builtin_shear_cycle, builtin_torus_product,
    };
    use approx::assert_relative_eq;

    fn frame_invariants(frame: &SplittingFrame) {
        let n = frame.dim();
        let id = DMatrix::identity(n, n);
        let sum = &frame.proj_minus + &frame.proj_plus + &frame.proj_zero;
        assert!(
            (sum - &id).norm() < 1e-8,
            "projections do not sum to identity"
        );
        for p in [&frame.proj_minus, &frame.proj_plus, &frame.proj_zero] {
            assert!((p * p - p).norm() < 1e-8, "projection not idempotent");
        }
        if frame.n_minus() > 0 {
            assert!((&frame.proj_minus * &frame.basis_minus - &frame.basis_minus).norm() < 1e-8);
        }
        if frame.n_plus() > 0 {
            assert!((&frame.proj_minus * &frame.basis_plus).norm() < 1e-8);
        }
    }

    #[test]
    fn shear_cycle_splitting_has_expected_structure() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let xi = DVector::from_vec(vec![1.0, 0.0]);
        let frame = splitting_periodic(&sys, &xi, &SplittingConfig::default()).unwrap();
        assert_eq!(frame.n_minus(), 1);
        assert_eq!(frame.n_plus(), 0);
        assert_eq!(frame.n_zero(), 1);
        frame_invariants(&frame);
        // neutral direction is the flow direction; P0 v = v
        let v = sys.eval(&xi);
        assert!((frame.basis_zero.column(0).clone_owned() - v.normalize()).norm() < 1e-12);
        assert!((&frame.proj_zero * &v - &v).norm() < 1e-8);
        // stable eigendirection of the polar linearization [[0, -2b], [0, -2]]
        // at eigenvalue -2 is (dphi, dr) = (b, 1); at the point (1, 0) this is
        // the Cartesian direction (1, b)/sqrt(1 + b^2) = (1, 1)/sqrt(2).
        let expected = DVector::from_vec(vec![1.0, 1.0]).normalize();
        let got = frame.basis_minus.column(0).clone_owned();
        let cosine = got.dot(&expected).abs();
        assert!(cosine > 1.0 - 1e-6, "stable direction off: cos = {cosine}");
        assert!(!frame.orientation_flip);
        // K- empty, J- = L-
        assert_eq!(frame.k_minus.ncols(), 0);
        assert_eq!(frame.j_minus.ncols(), 1);
    }

    #[test]
    fn counterexample_is_rejected_as_nonhyperbolic() {
        let sys = builtin_counterexample();
        let xi = DVector::from_vec(vec![1.0, 0.0]);
        let err = splitting_periodic(&sys, &xi, &SplittingConfig::default()).unwrap_err();
        match err {
            Error::NonHyperbolic { reason } => {
                assert!(reason.contains("unit circle"), "diagnostic: {reason}")
            }
            other => panic!("expected NonHyperbolic, got {other:?}"),
        }
    }

    #[test]
    fn linear_block_splits_into_coordinate_blocks() {
        let sys = builtin_linear_block(2.0, 1.0, 1, 1).unwrap();
        let xi = DVector::from_vec(vec![0.0, 0.0, 0.4]);
        let frame = splitting_general(&sys, &xi, 8.0, &SplittingConfig::default()).unwrap();
        assert_eq!((frame.n_minus(), frame.n_plus(), frame.n_zero()), (1, 1, 1));
        frame_invariants(&frame);
        assert_relative_eq!(frame.basis_minus.column(0)[0].abs(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(frame.basis_plus.column(0)[1].abs(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(frame.basis_zero.column(0)[2].abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn torus_splitting_is_product_of_factor_splittings() {
        let sys = builtin_torus_product(&[(1.0, 1.0), (2.0f64.sqrt(), 0.5)]).unwrap();
        let xi = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let frame = splitting_general(&sys, &xi, 8.0, &SplittingConfig::default()).unwrap();
        assert_eq!((frame.n_minus(), frame.n_plus(), frame.n_zero()), (2, 0, 2));
        frame_invariants(&frame);

        // Product-structure oracle: per-factor planar splittings assembled
        // into block vectors.
        let f1 = builtin_shear_cycle(1.0, 1.0);
        let p1 = splitting_periodic(
            &f1,
            &DVector::from_vec(vec![1.0, 0.0]),
            &SplittingConfig::default(),
        )
        .unwrap();
        let f2 = builtin_shear_cycle(2.0f64.sqrt(), 0.5);
        let p2 = splitting_periodic(
            &f2,
            &DVector::from_vec(vec![1.0, 0.0]),
            &SplittingConfig::default(),
        )
        .unwrap();
        let mut expected = DMatrix::zeros(4, 2);
        expected
            .view_mut((0, 0), (2, 1))
            .copy_from(&p1.basis_minus.column(0).clone_owned());
        expected
            .view_mut((2, 1), (2, 1))
            .copy_from(&p2.basis_minus.column(0).clone_owned());
        let angle = subspace::max_principal_angle(&frame.basis_minus, &expected);
        assert!(angle < 1e-6, "stable block angle {angle}");
    }

    #[test]
    fn general_route_agrees_with_periodic_route_on_the_cycle() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let xi = DVector::from_vec(vec![1.0, 0.0]);
        let cfg = SplittingConfig::default();
        let periodic = splitting_periodic(&sys, &xi, &cfg).unwrap();
        let general = splitting_general(&sys, &xi, 8.0, &cfg).unwrap();
        let angle_minus =
            subspace::max_principal_angle(&periodic.basis_minus, &general.basis_minus);
        let angle_zero = subspace::max_principal_angle(&periodic.basis_zero, &general.basis_zero);
        assert!(angle_minus < 1e-6, "stable angle {angle_minus}");
        assert!(angle_zero < 1e-6, "neutral angle {angle_zero}");
    }

    #[test]
    fn transport_preserves_subspaces_and_projections() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let xi = DVector::from_vec(vec![1.0, 0.0]);
        let cfg = SplittingConfig::default();
        let frame = splitting_periodic(&sys, &xi, &cfg).unwrap();
        let period = 2.0 * std::f64::consts::PI;
        let cache = flow::variational(&sys, &xi, (0.0, period), &cfg.integ).unwrap();

        // t = 0: same frame
        let same = transport(&frame, &cache, 0.0).unwrap();
        assert!((&same.proj_minus - &frame.proj_minus).norm() < 1e-10);

        // full period: the cycle closes, subspaces repeat
        let around = transport(&frame, &cache, period).unwrap();
        let angle = subspace::max_principal_angle(&around.basis_minus, &frame.basis_minus);
        assert!(angle < 1e-6, "period-transport angle {angle}");

        // transported projections agree with a directly computed splitting
        let t = 1.3;
        let direct = splitting_periodic(&sys, &cache.state_at(t), &cfg).unwrap();
        let moved = transport(&frame, &cache, t).unwrap();
        assert!(
            (&moved.proj_minus - &direct.proj_minus).norm() < 1e-6,
            "projection residual {}",
            (&moved.proj_minus - &direct.proj_minus).norm()
        );
    }

    #[test]
    fn stable_decay_bound_holds_with_estimated_constants() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let cfg = SplittingConfig::default();
        let source = PeriodicSource::new(sys.clone(), cfg.clone()).unwrap();
        let constants = estimate_constants(&source, 0.1, 0.2, &ConstantsConfig::default()).unwrap();
        assert!(
            constants.alpha >= 1.9 && constants.alpha <= 2.0,
            "alpha = {}",
            constants.alpha
        );
        assert!(constants.is_admissible());
        assert!(constants.kappa < 1.0);

        // || X^t eta || <= c e^{-alpha t} ||eta|| on sampled (x, eta, t)
        let points = sample_manifold_points(&sys, source.descriptor(), 5, &cfg.integ).unwrap();
        for p in &points {
            let frame = source.splitting_at(p).unwrap();
            let cache = flow::variational(&sys, p, (0.0, 5.0), &cfg.integ).unwrap();
            for k in 1..=4 {
                let t = 1.25 * k as f64;
                let xt = cache.matrix_at(t).unwrap();
                let eta = frame.basis_minus.column(0).clone_owned();
                let lhs = (xt * &eta).norm();
                let rhs = constants.c * (-constants.alpha * t).exp();
                assert!(lhs <= rhs * (1.0 + 1e-9), "decay bound {lhs} > {rhs} at t={t}");
            }
        }
    }

    #[test]
    fn linear_block_constants_are_exact_modulo_margin() {
        let sys = builtin_linear_block(2.0, 1.0, 1, 1).unwrap();
        let source = GeneralSource::new(sys, SplittingConfig::default()).unwrap();
        let constants = estimate_constants(&source, 0.1, 0.2, &ConstantsConfig::default()).unwrap();
        // linear field: zero Jacobian Lipschitz constant, so kappa = 0 and the
        // radii are unconstrained
        assert_eq!(constants.c_lip, 0.0);
        assert_eq!(constants.kappa, 0.0);
        assert!(constants.is_admissible());
        assert_relative_eq!(constants.c, 1.0, epsilon = 1e-6);
        assert_relative_eq!(constants.k_proj, 1.0, epsilon = 1e-6);
        // alpha is the worst exponent (min of a and the backward mu) shaved by
        // the safety margin
        assert!(
            constants.alpha > 0.9 && constants.alpha <= 1.0,
            "alpha = {}",
            constants.alpha
        );
        assert_eq!(constants.shrink_steps, 0);
    }

    #[test]
    fn counterexample_source_construction_fails() {
        let sys = builtin_counterexample();
        let err = PeriodicSource::new(sys, SplittingConfig::default())
            .err()
            .expect("counterexample must not build a periodic source");
        assert!(err.is_hyperbolicity_failure());
    }

    #[test]
    fn projector_norm_kernel_bound_sampled() {
        // || X^t P- [X^s]^{-1} || <= K e^{-alpha (t-s)} for t >= s
        let sys = builtin_shear_cycle(1.0, 1.0);
        let cfg = SplittingConfig::default();
        let source = PeriodicSource::new(sys.clone(), cfg.clone()).unwrap();
        let constants = estimate_constants(&source, 0.1, 0.2, &ConstantsConfig::default()).unwrap();
        let xi = DVector::from_vec(vec![1.0, 0.0]);
        let frame = source.splitting_at(&xi).unwrap();
        let cache = flow::variational(&sys, &xi, (0.0, 4.0), &cfg.integ).unwrap();
        for (t, s) in [(1.0, 0.5), (2.0, 0.5), (3.5, 1.0), (4.0, 0.0)] {
            let xt = cache.matrix_at(t).unwrap();
            let xs = cache.matrix_at(s).unwrap();
            let xs_inv = xs.clone().lu().try_inverse().unwrap();
            let g = &xt * &frame.proj_minus * &xs_inv;
            let bound = constants.k_proj * (-constants.alpha * (t - s)).exp();
            assert!(
                subspace::operator_norm(&g) <= bound * (1.0 + 1e-6),
                "kernel bound violated at (t,s)=({t},{s})"
            );
        }
    }

    #[test]
    fn user_override_changes_provenance() {
        let sys = builtin_shear_cycle(1.0, 1.0);
        let source = PeriodicSource::new(sys, SplittingConfig::default()).unwrap();
        let mut constants =
            estimate_constants(&source, 0.1, 0.2, &ConstantsConfig::default()).unwrap();
        constants.override_field("alpha", 1.8).unwrap();
        assert_eq!(
            constants.provenance.get("alpha"),
            Some(&Provenance::UserSupplied)
        );
        assert_eq!(constants.provenance.get("c"), Some(&Provenance::Estimated));
        assert!(constants.override_field("nope", 1.0).is_err());
    }
}
