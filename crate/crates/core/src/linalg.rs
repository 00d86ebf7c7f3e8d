//! Dense Cholesky helpers and their reverse-mode adjoints.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Diagonal jitter added before every kernel factorization.
pub const JITTER: f64 = 1e-6;
/// Largest jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

/// Lower Cholesky factor of `k + jitter * I`, escalating the jitter by
/// decades from [`JITTER`] to [`MAX_JITTER`]. Returns the factor and the
/// jitter actually used.
pub fn cholesky_jittered(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let mut jitter = JITTER;
    loop {
        let mut shifted = k.clone();
        for a in 0..shifted.nrows() {
            shifted[(a, a)] += jitter;
        }
        if let Some(chol) = shifted.cholesky() {
            return Ok((chol.unpack(), jitter));
        }
        if jitter >= MAX_JITTER {
            return Err(Error::Numerical(diagnose(k, jitter)));
        }
        jitter *= 10.0;
    }
}

fn diagnose(k: &DMatrix<f64>, jitter: f64) -> String {
    let diag = k.diagonal();
    let finite = k.iter().all(|x| x.is_finite());
    let min_eig = if finite {
        k.clone().symmetric_eigenvalues().min()
    } else {
        f64::NAN
    };
    format!(
        "cholesky failed on {}x{} matrix after jitter {jitter:e}: diagonal in [{:.3e}, {:.3e}], \
         smallest eigenvalue {min_eig:.3e}, all finite: {finite}",
        k.nrows(),
        k.ncols(),
        diag.min(),
        diag.max()
    )
}

/// `L^{-1} b` for lower-triangular `l`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a zero on its diagonal")
}

/// `L^{-T} b` for lower-triangular `l`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor has a zero on its diagonal")
}

/// Keeps the lower triangle (diagonal included) and zeroes the rest.
pub fn tril_in_place(m: &mut DMatrix<f64>) {
    for c in 0..m.ncols() {
        for r in 0..c.min(m.nrows()) {
            m[(r, c)] = 0.0;
        }
    }
}

/// Adjoint of `K = L L^T`: given the cotangent of the lower factor, returns the
/// symmetric cotangent of `K`.
pub fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = l.tr_mul(l_bar);
    tril_in_place(&mut p);
    for a in 0..p.nrows() {
        p[(a, a)] *= 0.5;
    }
    // L^{-T} P L^{-1} = L^{-T} (L^{-T} P^T)^T
    let right = solve_lower_transpose(l, &p.transpose()).transpose();
    let s = solve_lower_transpose(l, &right);
    (&s + s.transpose()) * 0.5
}

/// `log det(L L^T)` from a lower factor.
pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
