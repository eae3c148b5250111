//! Calculus on symmetric 3×3 matrices.
//!
//! Half-vectorisation order is `(a11, a21, a31, a22, a32, a33)` and full
//! vectorisation stacks columns, so that `D · vech(A) = vec(A)` with `D` the
//! 9×6 duplication matrix. The derivative of the matrix exponential is
//! expressed through the eigenbasis of the argument and the Loewner matrix of
//! first divided differences of `exp` over the eigenvalues.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector6 = SVector<f64, 6>;
pub type Vector9 = SVector<f64, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

/// Absolute asymmetry accepted by [`vech`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Eigengap below which divided differences switch to the Taylor expansion.
pub const EIGENGAP_TAYLOR_THRESHOLD: f64 = 1e-4;

/// Frobenius norm above which [`dexp_najfeld`] refuses to sum its series.
pub const NAJFELD_MAX_NORM: f64 = 50.0;

const NAJFELD_TERM_TOLERANCE: f64 = 1e-16;
const NAJFELD_MAX_TERMS: usize = 60;

const JACOBI_TOLERANCE: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 64;

/// A symmetric 3×3 matrix stored as its half-vectorisation
/// `(a11, a21, a31, a22, a32, a33)`.
///
/// The same six numbers are the per-voxel log-domain parameters of a tensor
/// field, so this type doubles as [`SymParam`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sym3(pub [f64; 6]);

/// Log-domain parameters `X_j` of one voxel: `S_j = unvec(D · X_j)`.
pub type SymParam = Sym3;

/// `(row, col)` of each half-vectorised entry, zero-based, lower triangle.
pub const VECH_INDEX: [(usize, usize); 6] = [(0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2)];

/// Half-vectorised positions of the diagonal entries.
pub const VECH_DIAGONAL: [usize; 3] = [0, 3, 5];

impl Sym3 {
    pub const fn zero() -> Self {
        Sym3([0.0; 6])
    }

    pub const fn identity() -> Self {
        Sym3([1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
    }

    pub const fn from_diagonal(d1: f64, d2: f64, d3: f64) -> Self {
        Sym3([d1, 0.0, 0.0, d2, 0.0, d3])
    }

    pub const fn scaled_identity(s: f64) -> Self {
        Sym3::from_diagonal(s, s, s)
    }

    pub fn a11(&self) -> f64 {
        self.0[0]
    }
    pub fn a21(&self) -> f64 {
        self.0[1]
    }
    pub fn a31(&self) -> f64 {
        self.0[2]
    }
    pub fn a22(&self) -> f64 {
        self.0[3]
    }
    pub fn a32(&self) -> f64 {
        self.0[4]
    }
    pub fn a33(&self) -> f64 {
        self.0[5]
    }

    pub fn vech(&self) -> Vector6 {
        Vector6::from_column_slice(&self.0)
    }

    pub fn from_vech(v: &Vector6) -> Self {
        let mut out = [0.0; 6];
        out.copy_from_slice(v.as_slice());
        Sym3(out)
    }

    /// Full symmetric matrix; `A == Aᵀ` holds bit-exactly.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [a11, a21, a31, a22, a32, a33] = self.0;
        Matrix3::new(a11, a21, a31, a21, a22, a32, a31, a32, a33)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.to_matrix().norm()
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[3] + self.0[5]
    }

    /// Adds `s` to each diagonal entry, i.e. `A + s·I`.
    pub fn shift_diagonal(&self, s: f64) -> Self {
        let mut out = *self;
        for k in VECH_DIAGONAL {
            out.0[k] += s;
        }
        out
    }
}

/// Half-vectorisation of a symmetric matrix.
pub fn vech(a: &Matrix3<f64>) -> Result<Sym3> {
    for (row, col) in [(1, 0), (2, 0), (2, 1)] {
        let gap = (a[(row, col)] - a[(col, row)]).abs();
        if !(gap <= SYMMETRY_TOLERANCE) {
            return Err(Error::NotSymmetric {
                row: row + 1,
                col: col + 1,
                gap,
                tolerance: SYMMETRY_TOLERANCE,
            });
        }
    }
    Ok(Sym3(VECH_INDEX.map(|(r, c)| a[(r, c)])))
}

/// Column-major stacking of a 3×3 matrix.
pub fn vec(a: &Matrix3<f64>) -> Vector9 {
    Vector9::from_column_slice(a.as_slice())
}

pub fn unvec(u: &Vector9) -> Matrix3<f64> {
    Matrix3::from_column_slice(u.as_slice())
}

/// The 9×6 duplication matrix mapping `vech(A)` to `vec(A)`.
pub fn duplication() -> Matrix9x6 {
    let mut d = Matrix9x6::zeros();
    for (k, &(r, c)) in VECH_INDEX.iter().enumerate() {
        d[(r + 3 * c, k)] = 1.0;
        d[(c + 3 * r, k)] = 1.0;
    }
    d
}

/// Eigendecomposition `A = V · diag(values) · Vᵀ` of a symmetric matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenDecomp3 {
    /// Sorted in descending order.
    pub values: Vector3<f64>,
    /// Orthonormal; column `k` pairs with `values[k]`.
    pub vectors: Matrix3<f64>,
}

impl EigenDecomp3 {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.vectors * Matrix3::from_diagonal(&self.values) * self.vectors.transpose()
    }

    pub fn min_value(&self) -> f64 {
        self.values[2]
    }

    pub fn max_value(&self) -> f64 {
        self.values[0]
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi sweeps.
///
/// Eigenvalues come back sorted descending. Each eigenvector is signed so
/// that its largest-magnitude component is positive (first one on ties).
pub fn eig_sym3(a: &Sym3) -> EigenDecomp3 {
    let mut m = a.to_matrix();
    let mut v = Matrix3::<f64>::identity();
    let scale = m.norm();

    if scale > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            let off = (m[(1, 0)].powi(2) + m[(2, 0)].powi(2) + m[(2, 1)].powi(2)).sqrt();
            if off <= JACOBI_TOLERANCE * scale {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                jacobi_rotate(&mut m, &mut v, p, q);
            }
        }
    }

    let mut order = [0usize, 1, 2];
    let diag = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));

    let mut values = Vector3::zeros();
    let mut vectors = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = diag[src];
        let mut col = v.column(src).into_owned();
        let mut lead = 0;
        for k in 1..3 {
            if col[k].abs() > col[lead].abs() {
                lead = k;
            }
        }
        if col[lead] < 0.0 {
            col = -col;
        }
        vectors.set_column(dst, &col);
    }
    EigenDecomp3 { values, vectors }
}

/// One Jacobi rotation annihilating `m[(p, q)]`; accumulates into `v`.
fn jacobi_rotate(m: &mut Matrix3<f64>, v: &mut Matrix3<f64>, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
    let c = 1.0 / t.hypot(1.0);
    let s = t * c;

    let mut j = Matrix3::identity();
    j[(p, p)] = c;
    j[(q, q)] = c;
    j[(p, q)] = s;
    j[(q, p)] = -s;

    let rotated = j.transpose() * *m * j;
    *m = (rotated + rotated.transpose()) * 0.5;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    *v *= j;
}

/// Divided difference `(exp(a) - exp(b)) / (a - b)`, with the Taylor branch
/// for gaps at or below [`EIGENGAP_TAYLOR_THRESHOLD`]. Symmetric in its
/// arguments bit-for-bit.
pub fn exp_divided_difference(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi - lo > EIGENGAP_TAYLOR_THRESHOLD {
        divided_difference_direct(hi, lo)
    } else {
        divided_difference_taylor(hi, lo)
    }
}

/// `(e^hi - e^lo)/(hi - lo)`; small gaps go through `expm1` to avoid
/// cancellation just above the threshold.
#[inline]
fn divided_difference_direct(hi: f64, lo: f64) -> f64 {
    let gap = hi - lo;
    if gap < 1.0 {
        lo.exp() * gap.exp_m1() / gap
    } else {
        (hi.exp() - lo.exp()) / gap
    }
}

#[inline]
fn divided_difference_taylor(hi: f64, lo: f64) -> f64 {
    let eps = hi - lo;
    lo.exp() * (1.0 + eps / 2.0 + eps * eps / 6.0 + eps * eps * eps / 24.0)
}

/// Loewner matrix of `exp` at the eigenvalues `lambda`.
pub fn loewner_exp(lambda: &Vector3<f64>) -> Matrix3<f64> {
    let mut l = Matrix3::zeros();
    for i in 0..3 {
        l[(i, i)] = lambda[i].exp();
        for j in 0..i {
            let d = exp_divided_difference(lambda[i], lambda[j]);
            l[(i, j)] = d;
            l[(j, i)] = d;
        }
    }
    l
}

/// `exp(M) = V · diag(exp λ) · Vᵀ`.
pub fn exp_sym3(m: &Sym3) -> Sym3 {
    exp_from_eigen(&eig_sym3(m))
}

pub fn exp_from_eigen(eig: &EigenDecomp3) -> Sym3 {
    let e = eig.values.map(f64::exp);
    let q = eig.vectors * Matrix3::from_diagonal(&e) * eig.vectors.transpose();
    // lower triangle taken as authoritative
    Sym3(VECH_INDEX.map(|(r, c)| q[(r, c)]))
}

/// Inverse of [`exp_sym3`] on positive-definite input.
pub fn log_spd(q: &Sym3) -> Result<Sym3> {
    let eig = eig_sym3(q);
    if !(eig.min_value() > 0.0) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: eig.min_value(),
        });
    }
    let l = eig.values.map(f64::ln);
    let s = eig.vectors * Matrix3::from_diagonal(&l) * eig.vectors.transpose();
    Ok(Sym3(VECH_INDEX.map(|(r, c)| s[(r, c)])))
}

/// Jacobian of `vec(exp(M))` with respect to `vec(M)`:
/// `(V ⊗ V) · diag(vec(L)) · (Vᵀ ⊗ Vᵀ)`.
pub fn dexp_sym3(m: &Sym3) -> Matrix9 {
    dexp_from_eigen(&eig_sym3(m))
}

pub fn dexp_from_eigen(eig: &EigenDecomp3) -> Matrix9 {
    let v = eig.vectors;
    let l = loewner_exp(&eig.values);
    let left: Matrix9 = v.kronecker(&v);
    let right: Matrix9 = v.transpose().kronecker(&v.transpose());
    let mid = Matrix9::from_diagonal(&vec(&l));
    left * mid * right
}

/// Kronecker sum `P ⊕ Q = P ⊗ I + I ⊗ Q`.
fn kronecker_sum(p: &Matrix3<f64>, q: &Matrix3<f64>) -> Matrix9 {
    let id = Matrix3::<f64>::identity();
    p.kronecker(&id) + id.kronecker(q)
}

/// Derivative of the matrix exponential through the adjoint action:
/// `(exp(M/2)ᵀ ⊗ exp(M/2)) · sinch(-ad_{M/2})` with `ad_M = (-Mᵀ) ⊕ M`.
///
/// The exponential factor is formed by scaling and squaring of a Taylor
/// series so that nothing here shares code with [`dexp_sym3`].
pub fn dexp_najfeld(m: &Sym3) -> Result<Matrix9> {
    let norm = m.frobenius_norm();
    if !(norm <= NAJFELD_MAX_NORM) {
        return Err(Error::SeriesDivergence {
            norm,
            limit: NAJFELD_MAX_NORM,
        });
    }
    let half = m.to_matrix() * 0.5;
    let ad = kronecker_sum(&(-half.transpose()), &half);
    let neg_ad = -ad;
    let sinch = sinch_series(&neg_ad).ok_or(Error::SeriesDivergence {
        norm,
        limit: NAJFELD_MAX_NORM,
    })?;
    let e = expm_taylor(&half);
    Ok(e.transpose().kronecker(&e) * sinch)
}

/// `Σ_k A^{2k} / (2k+1)!`, or `None` when the term cap is hit first.
fn sinch_series(a: &Matrix9) -> Option<Matrix9> {
    let a2 = a * a;
    let mut term = Matrix9::identity();
    let mut sum = term;
    for k in 1..=NAJFELD_MAX_TERMS {
        let n = (2 * k) as f64;
        term = &term * &a2 / (n * (n + 1.0));
        sum += term;
        if term.norm() < NAJFELD_TERM_TOLERANCE * sum.norm() {
            return Some(sum);
        }
    }
    None
}

fn expm_taylor(a: &Matrix3<f64>) -> Matrix3<f64> {
    let norm = a.norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let mut term = Matrix3::identity();
    let mut sum = term;
    for k in 1..30 {
        term = term * scaled / k as f64;
        sum += term;
        if term.norm() <= f64::EPSILON * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn vech_order_and_examples() {
        let id = Matrix3::identity();
        assert_eq!(vech(&id).unwrap().0, [1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 5.0));
        assert_eq!(vech(&d).unwrap().0, [2.0, 0.0, 0.0, 3.0, 0.0, 5.0]);
        // aRC = 10*R + C
        let a = Matrix3::new(11.0, 21.0, 31.0, 21.0, 22.0, 32.0, 31.0, 32.0, 33.0);
        assert_eq!(vech(&a).unwrap().0, [11.0, 21.0, 31.0, 22.0, 32.0, 33.0]);
    }

    #[test]
    fn vech_rejects_asymmetric() {
        let mut a = Matrix3::identity();
        a[(0, 2)] = 1e-9;
        match vech(&a) {
            Err(Error::NotSymmetric { row: 3, col: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        a[(0, 2)] = 5e-13;
        assert!(vech(&a).is_ok());
    }

    #[test]
    fn vec_identity_is_column_stack() {
        let v = vec(&Matrix3::identity());
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Matrix3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0);
        assert_eq!(vec(&a).as_slice(), &[1.0, 4.0, 7.0, 2.0, 5.0, 8.0, 3.0, 6.0, 9.0]);
        assert_eq!(unvec(&vec(&a)), a);
    }

    #[test]
    fn duplication_structure() {
        let d = duplication();
        assert_eq!(d.row(3), d.row(1));
        for r in 0..9 {
            assert_eq!(d.row(r).sum(), 1.0);
        }
        let colsums: Vec<f64> = (0..6).map(|c| d.column(c).sum()).collect();
        assert_eq!(colsums, vec![1.0, 2.0, 2.0, 1.0, 2.0, 1.0]);
        let id = d * Sym3::identity().vech();
        assert_eq!(id, vec(&Matrix3::identity()));
    }

    #[test]
    fn eig_of_diagonal() {
        let e = eig_sym3(&Sym3::from_diagonal(3.0, 2.0, 1.0));
        assert_eq!(e.values, Vector3::new(3.0, 2.0, 1.0));
        assert_eq!(e.vectors, Matrix3::identity());

        let e = eig_sym3(&Sym3::from_diagonal(1.0, 3.0, 2.0));
        assert_eq!(e.values, Vector3::new(3.0, 2.0, 1.0));
        assert_eq!(e.vectors.column(0).into_owned(), Vector3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn eig_of_identity_reconstructs() {
        let e = eig_sym3(&Sym3::identity());
        assert_eq!(e.values, Vector3::new(1.0, 1.0, 1.0));
        assert_relative_eq!(e.reconstruct(), Matrix3::identity(), epsilon = 1e-15);
        assert_relative_eq!(e.vectors.transpose() * e.vectors, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn eig_sign_convention() {
        let a = Sym3([2.0, -1.0, 0.5, 3.0, 0.25, -1.0]);
        let e = eig_sym3(&a);
        for k in 0..3 {
            let col = e.vectors.column(k);
            let lead = col.iamax();
            assert!(col[lead] > 0.0);
        }
        assert_relative_eq!(e.reconstruct(), a.to_matrix(), epsilon = 1e-13);
    }

    #[test]
    fn eig_zero_matrix() {
        let e = eig_sym3(&Sym3::zero());
        assert_eq!(e.values, Vector3::zeros());
        assert_eq!(e.vectors, Matrix3::identity());
    }

    #[test]
    fn loewner_examples() {
        let l = loewner_exp(&Vector3::zeros());
        assert_eq!(l, Matrix3::repeat(1.0));

        let l = loewner_exp(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(l[(0, 1)], std::f64::consts::E - 1.0, max_relative = 1e-15);
        assert_relative_eq!(l[(0, 0)], std::f64::consts::E);
        assert_eq!(l[(1, 2)], 1.0);
    }

    #[test]
    fn loewner_symmetric_and_positive() {
        let lam = Vector3::new(0.3, 0.3 + 5e-5, -2.0);
        let l = loewner_exp(&lam);
        assert_eq!(l, l.transpose());
        assert!(l.iter().all(|&x| x > 0.0));
        for i in 0..3 {
            assert_eq!(l[(i, i)], lam[i].exp());
        }
    }

    #[test]
    fn loewner_continuous_at_threshold() {
        // both branches agree on either side of the switch, so the jump is
        // below 1e-9 relative; the function itself moves by ~e^base·1e-7
        for base in [-3.0, 0.0, 1.5, 6.0] {
            for factor in [1.0 - 1e-3, 1.0, 1.0 + 1e-3] {
                let hi = base + EIGENGAP_TAYLOR_THRESHOLD * factor;
                let direct = divided_difference_direct(hi, base);
                let taylor = divided_difference_taylor(hi, base);
                assert!((direct - taylor).abs() < 1e-9 * taylor, "{base}: {direct} vs {taylor}");
            }
            let below = exp_divided_difference(base + EIGENGAP_TAYLOR_THRESHOLD * (1.0 - 1e-3), base);
            let above = exp_divided_difference(base + EIGENGAP_TAYLOR_THRESHOLD * (1.0 + 1e-3), base);
            let slope = 0.5 * base.exp() * EIGENGAP_TAYLOR_THRESHOLD * 2e-3;
            assert!((above - below - slope).abs() < 1e-9 * below);
        }
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_sym3(&Sym3::zero()), Sym3::identity());
        let q = exp_sym3(&Sym3::from_diagonal(2f64.ln(), 3f64.ln(), 5f64.ln()));
        let expect = [2.0, 0.0, 0.0, 3.0, 0.0, 5.0];
        for (a, b) in q.0.iter().zip(expect) {
            assert_relative_eq!(*a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn log_inverts_exp() {
        let s = Sym3([0.4, -0.2, 0.1, -0.3, 0.05, 1.2]);
        let back = log_spd(&exp_sym3(&s)).unwrap();
        for (a, b) in back.0.iter().zip(s.0) {
            assert_relative_eq!(*a, b, epsilon = 1e-13);
        }
        assert!(matches!(
            log_spd(&Sym3::from_diagonal(1.0, -1.0, 2.0)),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn dexp_at_zero_is_identity() {
        assert_eq!(dexp_sym3(&Sym3::zero()), Matrix9::identity());
        assert_relative_eq!(dexp_najfeld(&Sym3::zero()).unwrap(), Matrix9::identity(), epsilon = 1e-15);
    }

    #[test]
    fn najfeld_scalar_matrix() {
        let d = dexp_najfeld(&Sym3::identity()).unwrap();
        assert_relative_eq!(d, Matrix9::identity() * std::f64::consts::E, max_relative = 1e-14);
    }

    #[test]
    fn najfeld_rejects_large_norm() {
        let m = Sym3::scaled_identity(40.0);
        assert!(matches!(dexp_najfeld(&m), Err(Error::SeriesDivergence { .. })));
    }

    #[test]
    fn dexp_is_symmetric() {
        let d = dexp_sym3(&Sym3([0.5, 0.1, -0.3, 1.0, 0.2, -0.7]));
        assert_relative_eq!(d, d.transpose(), epsilon = 1e-14);
    }
}
