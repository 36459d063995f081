//! Dense matrix helpers shared by the solvers and the verification code.

use nalgebra::{ComplexField, DMatrix, DVector, Dyn, Schur};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

pub fn identity(n: usize) -> Mat {
    Mat::identity(n, n)
}

/// Block-diagonal matrix with the given (not necessarily square) blocks.
pub fn blkdiag(blocks: &[Mat]) -> Mat {
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

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Deflation tolerances tried in turn. nalgebra's default (machine epsilon, unbounded
/// iterations) can cycle forever on matrices with many repeated eigenvalues, which is
/// exactly what Kronecker-structured global matrices have.
const SCHUR_TOLERANCES: [f64; 4] = [f64::EPSILON, 1e-14, 1e-12, 1e-10];

/// Schur decomposition with a bounded iteration count.
pub fn schur<T: ComplexField>(m: &DMatrix<T>) -> Option<Schur<T, Dyn>> {
    let max_iter = 200 * m.nrows().max(1);
    SCHUR_TOLERANCES
        .iter()
        .find_map(|&eps| m.clone().try_schur(nalgebra::convert(eps), max_iter))
}

/// Max real part over the eigenvalues of a square matrix; NaN if the QR iteration fails.
pub fn spectral_abscissa(m: &Mat) -> f64 {
    assert!(m.is_square(), "spectral abscissa of a non-square matrix");
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    match schur(m) {
        Some(s) => s
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max),
        None => f64::NAN,
    }
}

pub fn sym_eigenvalues(m: &Mat) -> Vector {
    let mut ev = symmetrize(m).symmetric_eigenvalues();
    ev.as_mut_slice().sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Numerical rank with threshold `rel_tol * sigma_max`.
pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clipped.
pub fn sqrt_psd(m: &Mat) -> Mat {
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `[B, AB, …, A^{n-1}B]`
pub fn controllability_matrix(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = Mat::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    out
}

pub fn is_controllable(a: &Mat, b: &Mat) -> bool {
    rank(&controllability_matrix(a, b), 1e-9) == a.nrows()
}

/// Observability of `(C, A)` via the rank of the transposed controllability matrix.
pub fn is_observable(c: &Mat, a: &Mat) -> bool {
    rank(&controllability_matrix(&a.transpose(), &c.transpose()), 1e-9) == a.nrows()
}

/// Reshape a stacked vector of `n_blocks` blocks of size `block` into an
/// `n_blocks × block` matrix whose row `i` is block `i`.
pub fn blocks_as_rows(v: &[f64], n_blocks: usize, block: usize) -> Mat {
    debug_assert_eq!(v.len(), n_blocks * block);
    Mat::from_row_slice(n_blocks, block, v)
}

pub fn rows_as_blocks(m: &Mat) -> Vector {
    let mut out = Vector::zeros(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
    out
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blkdiag_places_blocks() {
        let a = Mat::from_element(1, 2, 1.0);
        let b = Mat::from_element(2, 1, 2.0);
        let m = blkdiag(&[a, b]);
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(2, 2)], 2.0);
        assert_eq!(m[(1, 0)], 0.0);
    }

    #[test]
    fn abscissa_of_jordan_block() {
        let m = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(spectral_abscissa(&m), 0.0);
        assert!((spectral_abscissa(&(-identity(3))) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn double_integrator_is_controllable() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(is_controllable(&a, &b));
        let c = Mat::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(!is_observable(&c, &a));
    }

    #[test]
    fn abscissa_with_many_repeated_eigenvalues() {
        let local = Mat::from_row_slice(2, 2, &[0.0, 1.0, -3.6, -4.8]);
        let m = kron(&identity(16), &local);
        let expected = spectral_abscissa(&local);
        assert!((spectral_abscissa(&m) - expected).abs() < 1e-8);
    }

    #[test]
    fn row_block_reshape_round_trip() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = blocks_as_rows(&v, 3, 2);
        assert_eq!(m[(1, 0)], 3.0);
        assert_eq!(rows_as_blocks(&m).as_slice(), &v);
    }
}
