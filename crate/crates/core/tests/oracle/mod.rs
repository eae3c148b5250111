//! Reference implementations that share no code with the library.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};

/// Matrix exponential by scaling and squaring a 30-term Taylor series.
pub fn expm(a: &Matrix3<f64>) -> Matrix3<f64> {
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for k in 1..30 {
        term = term * scaled / k as f64;
        sum += term;
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

/// Eigenvalues of a symmetric 3×3 matrix from the trigonometric solution of
/// its characteristic polynomial, descending.
pub fn char_poly_eigenvalues(a: &Matrix3<f64>) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return [q; 3];
    }
    let b = (a - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

/// Divided difference of `exp` via `expm1`, accurate for tiny gaps.
pub fn exp_divided_difference(a: f64, b: f64) -> f64 {
    if a == b {
        a.exp()
    } else {
        let lo = a.min(b);
        lo.exp() * (b - a).abs().exp_m1() / (b - a).abs()
    }
}

/// Central difference of `f` along direction `h` with step `eps`.
pub fn central_difference<F>(f: F, x: &[f64], h: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let plus: Vec<f64> = x.iter().zip(h).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = x.iter().zip(h).map(|(a, b)| a - eps * b).collect();
    f(&plus).iter().zip(f(&minus)).map(|(p, m)| (p - m) / (2.0 * eps)).collect()
}

/// Symmetric matrix from `(a11, a21, a31, a22, a32, a33)`.
pub fn sym_from_lower(p: &[f64]) -> Matrix3<f64> {
    Matrix3::new(p[0], p[1], p[2], p[1], p[3], p[4], p[2], p[4], p[5])
}

/// `vᵀAv` written out term by term.
pub fn quadratic_form(a: &Matrix3<f64>, v: &Vector3<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += v[i] * a[(i, j)] * v[j];
        }
    }
    s
}

fn huber(g: f64, delta: f64) -> f64 {
    if g.abs() <= delta {
        0.5 * g * g
    } else {
        delta * (g.abs() - 0.5 * delta)
    }
}

/// `Σ_channels Σ_{x,y,z} huber(forward difference)` by explicit triple loop
/// over `[x][y][z]` nested vectors; `None` marks a masked voxel.
pub fn brute_force_tv(field: &[Vec<Vec<Option<[f64; 6]>>>], delta: f64) -> f64 {
    let (nx, ny, nz) = (field.len(), field[0].len(), field[0][0].len());
    let mut total = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let Some(here) = field[x][y][z] else { continue };
                let neighbours = [
                    (x + 1 < nx).then(|| field[x + 1][y][z]).flatten(),
                    (y + 1 < ny).then(|| field[x][y + 1][z]).flatten(),
                    (z + 1 < nz).then(|| field[x][y][z + 1]).flatten(),
                ];
                for n in neighbours.into_iter().flatten() {
                    for c in 0..6 {
                        total += huber(n[c] - here[c], delta);
                    }
                }
            }
        }
    }
    total
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}
