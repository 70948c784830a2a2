//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::DMatrix;

/// Condition number above which a matrix is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Margin required for numerical strict positive definiteness.
pub const STRICT_PD_MARGIN: f64 = 1e-10;

pub type Mat = DMatrix<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Mat, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= rel_tol * scale
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Inverse via LU, refusing matrices whose 2-norm condition number exceeds
/// [`SINGULAR_CONDITION`].
pub fn checked_inverse(m: &Mat) -> Option<Mat> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sv = m.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 || smax / smin > SINGULAR_CONDITION {
        return None;
    }
    m.clone().lu().try_inverse()
}

/// A factor `L` with `L L^T = m` for a symmetric positive semi-definite `m`.
/// Uses Cholesky when possible and otherwise an eigen-factor with negative
/// eigenvalues (down to `-1e-12` relative) clipped to zero.
pub fn psd_factor(m: &Mat) -> Mat {
    let n = m.nrows();
    if m.iter().all(|v| *v == 0.0) {
        return Mat::zeros(n, n);
    }
    let s = symmetrize(m);
    if let Some(ch) = s.clone().cholesky() {
        return ch.l();
    }
    let eig = s.symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let root = if *lambda > 0.0 { lambda.sqrt() } else { 0.0 };
        l.column_mut(j).scale_mut(root);
    }
    l
}

pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    // tr(A B) without forming the product.
    a.iter()
        .zip(b.transpose().iter())
        .map(|(x, y)| x * y)
        .sum()
}


pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}
