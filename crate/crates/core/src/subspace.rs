//! Small dense-subspace utilities on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Orthonormal basis of the column span (thin QR, rank-revealing by column norm).
pub fn orthonormalize(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cols.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(cols.ncols());
    for j in 0..cols.ncols() {
        let mut v = cols.column(j).clone_owned();
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-12 {
            basis.push(v / norm);
        }
    }
    if basis.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}

/// Operator 2-norm via SVD.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// 2-norm condition number; f64::INFINITY when numerically rank deficient.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Cosines of principal angles between the spans of two orthonormal bases,
/// sorted descending.
pub fn principal_angle_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    if a.ncols() == 0 || b.ncols() == 0 {
        return Vec::new();
    }
    let m = a.transpose() * b;
    let mut cos: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    cos.sort_by(|x, y| y.partial_cmp(x).unwrap());
    cos
}

/// Largest principal angle (radians) between two subspaces of equal dimension.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let cos = principal_angle_cosines(a, b);
    match cos.last() {
        Some(&c) => c.clamp(-1.0, 1.0).acos(),
        None => 0.0,
    }
}

/// Smallest principal angle (radians) between two subspaces; measures how
/// close they come to sharing a direction.
pub fn min_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let cos = principal_angle_cosines(a, b);
    match cos.first() {
        Some(&c) => c.clamp(-1.0, 1.0).acos(),
        None => std::f64::consts::FRAC_PI_2,
    }
}

/// Orthonormal basis of the intersection of two spans. Directions whose
/// principal-angle cosine exceeds `1 - tol` are treated as common.
pub fn intersection(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if a.ncols() == 0 || b.ncols() == 0 {
        return DMatrix::zeros(n, 0);
    }
    let m = a.transpose() * b;
    let svd = m.svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (k, &sigma) in svd.singular_values.iter().enumerate() {
        if sigma >= 1.0 - tol {
            cols.push(a * u.column(k).clone_owned());
        }
    }
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        orthonormalize(&DMatrix::from_columns(&cols))
    }
}

/// Rotate (and possibly reflect) the orthonormal basis `raw` within its own
/// span so it is as close as possible to `reference` (orthogonal Procrustes).
pub fn align_to(raw: &DMatrix<f64>, reference: &DMatrix<f64>) -> DMatrix<f64> {
    if raw.ncols() == 0 || reference.ncols() != raw.ncols() {
        return raw.clone();
    }
    let m = raw.transpose() * reference;
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    raw * (u * vt)
}

/// Complement of `sub` inside `ambient_basis`: the directions of the ambient
/// span orthogonal to `sub` (both orthonormal, sub a subspace of the span).
pub fn complement_within(ambient_basis: &DMatrix<f64>, sub: &DMatrix<f64>) -> DMatrix<f64> {
    let n = ambient_basis.nrows();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for j in 0..ambient_basis.ncols() {
        let mut v = ambient_basis.column(j).clone_owned();
        for k in 0..sub.ncols() {
            let b = sub.column(k);
            let proj = b.dot(&v);
            v -= b.clone_owned() * proj;
        }
        for c in &cols {
            let proj = c.dot(&v);
            v -= c * proj;
        }
        if v.norm() > 1e-9 {
            cols.push(v.normalize());
        }
    }
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}
