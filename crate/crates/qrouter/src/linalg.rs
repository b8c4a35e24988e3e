//! Dense complex linear algebra helpers shared across the crate.
//!
//! Everything here operates on `DMatrix<Complex<f64>>`. Hermitian
//! eigendecompositions are the workhorse: Hamiltonians, propagators,
//! matrix square roots and PSD projections all go through [`eigh`].

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64::new(0.0, 1.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const ZERO: C64 = C64::new(0.0, 0.0);

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Hermitian eigendecomposition with eigenvalues sorted ascending.
///
/// Returns `(evals, evecs)` with eigenvectors as columns, so that
/// `m = evecs * diag(evals) * evecs†`.
pub fn eigh(m: &CMat) -> (DVector<f64>, CMat) {
    let n = m.nrows();
    let se = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let evals = DVector::from_fn(n, |i, _| se.eigenvalues[order[i]]);
    let mut evecs = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        evecs.set_column(dst, &se.eigenvectors.column(src));
    }
    (evals, evecs)
}

/// Pre-diagonalized Hermitian operator, for cheap repeated `exp(-i H t)`.
pub struct HermitianExp {
    pub evals: DVector<f64>,
    pub evecs: CMat,
}

impl HermitianExp {
    pub fn new(h: &CMat) -> Self {
        let (evals, evecs) = eigh(h);
        Self { evals, evecs }
    }

    /// `exp(-i H t)`.
    pub fn propagator(&self, t: f64) -> CMat {
        let n = self.evals.len();
        let mut phased = self.evecs.clone();
        for j in 0..n {
            let ph = C64::from_polar(1.0, -self.evals[j] * t);
            for i in 0..n {
                phased[(i, j)] *= ph;
            }
        }
        phased * self.evecs.adjoint()
    }

    /// `exp(-i H t) m` without forming the propagator; cheaper whenever `m`
    /// has fewer columns than the dimension.
    pub fn apply_to(&self, m: &CMat, t: f64) -> CMat {
        let mut w = self.evecs.adjoint() * m;
        for j in 0..self.evals.len() {
            let ph = C64::from_polar(1.0, -self.evals[j] * t);
            for col in 0..w.ncols() {
                w[(j, col)] *= ph;
            }
        }
        &self.evecs * w
    }
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()) * c(0.5)
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn is_hermitian(m: &CMat, tol: f64) -> bool {
    max_abs(&(m - m.adjoint())) < tol
}

/// Square root of a PSD Hermitian matrix. Eigenvalues within `-clamp_tol`
/// of zero are clamped to zero; more negative ones are an error upstream.
pub fn sqrtm_psd(m: &CMat, clamp_tol: f64) -> Result<CMat, f64> {
    let (evals, evecs) = eigh(m);
    let min = evals.min();
    if min < -clamp_tol {
        return Err(min);
    }
    let n = evals.len();
    let mut cols = evecs.clone();
    for j in 0..n {
        let s = evals[j].max(0.0).sqrt();
        for i in 0..n {
            cols[(i, j)] *= c(s);
        }
    }
    Ok(&cols * evecs.adjoint())
}

/// Trace of a product `tr(a b)` without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Hilbert-Schmidt inner product `tr(a† b)`.
pub fn hs_inner(a: &CMat, b: &CMat) -> C64 {
    let mut acc = ZERO;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x.conj() * y;
    }
    acc
}

/// Row-major multi-index helpers for tensor-product spaces.
pub fn multi_to_index(multi: &[usize], dims: &[usize]) -> usize {
    let mut idx = 0;
    for (m, d) in multi.iter().zip(dims.iter()) {
        idx = idx * d + m;
    }
    idx
}

pub fn index_to_multi(mut idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut multi = vec![0; dims.len()];
    for k in (0..dims.len()).rev() {
        multi[k] = idx % dims[k];
        idx /= dims[k];
    }
    multi
}

/// Partial trace over the sites NOT listed in `keep` (order of `keep`
/// defines the output ordering).
pub fn partial_trace(rho: &CMat, dims: &[usize], keep: &[usize]) -> CMat {
    let keep_dims: Vec<usize> = keep.iter().map(|&k| dims[k]).collect();
    let out_dim: usize = keep_dims.iter().product();
    let total: usize = dims.iter().product();
    assert_eq!(rho.nrows(), total);
    let mut out = CMat::zeros(out_dim, out_dim);
    for r in 0..total {
        let rm = index_to_multi(r, dims);
        let rk: Vec<usize> = keep.iter().map(|&k| rm[k]).collect();
        let ri = multi_to_index(&rk, &keep_dims);
        for cidx in 0..total {
            let cm = index_to_multi(cidx, dims);
            // traced-out sites must match
            if dims
                .iter()
                .enumerate()
                .filter(|(s, _)| !keep.contains(s))
                .any(|(s, _)| rm[s] != cm[s])
            {
                continue;
            }
            let ck: Vec<usize> = keep.iter().map(|&k| cm[k]).collect();
            let ci = multi_to_index(&ck, &keep_dims);
            out[(ri, ci)] += rho[(r, cidx)];
        }
    }
    out
}

/// `|v⟩⟨v|`.
pub fn projector(v: &CVec) -> CMat {
    let n = v.len();
    CMat::from_fn(n, n, |r, c_| v[r] * v[c_].conj())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_hermitian(n: usize, seed: u64) -> CMat {
        // small deterministic LCG so the test has no rand dependency here
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let m = CMat::from_fn(n, n, |_, _| C64::new(next(), next()));
        hermitize(&m)
    }

    #[test]
    fn eigh_reconstructs_and_sorts() {
        let h = random_hermitian(12, 7);
        let (evals, evecs) = eigh(&h);
        for w in evals.as_slice().windows(2) {
            assert!(w[0] <= w[1]);
        }
        let mut d = CMat::zeros(12, 12);
        for k in 0..12 {
            d[(k, k)] = c(evals[k]);
        }
        let rec = &evecs * d * evecs.adjoint();
        assert!(max_abs(&(rec - h)) < 1e-12);
        let gram = evecs.adjoint() * &evecs;
        assert!(max_abs(&(gram - identity(12))) < 1e-12);
    }

    #[test]
    fn propagator_is_unitary_and_matches_series() {
        let h = random_hermitian(6, 3) * c(0.3);
        let u = HermitianExp::new(&h).propagator(0.7);
        assert!(max_abs(&(&u * u.adjoint() - identity(6))) < 1e-12);
        // compare against a Taylor series for a small-norm exponent
        let a = &h * C64::new(0.0, -0.7);
        let mut term = identity(6);
        let mut series = identity(6);
        for k in 1..40 {
            term = &term * &a / c(k as f64);
            series += &term;
        }
        assert!(max_abs(&(u - series)) < 1e-12);
    }

    #[test]
    fn sqrtm_squares_back() {
        let m = random_hermitian(5, 11);
        let psd = &m * m.adjoint();
        let s = sqrtm_psd(&psd, 1e-10).unwrap();
        assert!(max_abs(&(&s * &s - psd)) < 1e-10);
    }

    #[test]
    fn partial_trace_of_product_state() {
        let a = CMat::from_row_slice(2, 2, &[c(0.7), c(0.1), c(0.1), c(0.3)]);
        let b = CMat::from_row_slice(3, 3, &[c(0.5), ZERO, ZERO, ZERO, c(0.5), ZERO, ZERO, ZERO, ZERO]);
        let rho = kron(&a, &b);
        let ra = partial_trace(&rho, &[2, 3], &[0]);
        assert!(max_abs(&(ra - a)) < 1e-14);
        let rb = partial_trace(&rho, &[2, 3], &[1]);
        assert!(max_abs(&(rb - b)) < 1e-14);
    }

    #[test]
    fn multi_index_roundtrip() {
        let dims = [2, 3, 4];
        for i in 0..24 {
            assert_eq!(multi_to_index(&index_to_multi(i, &dims), &dims), i);
        }
        assert_abs_diff_eq!(multi_to_index(&[1, 2, 3], &dims) as f64, 23.0);
    }
}
