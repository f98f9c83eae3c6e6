//! Nonsymmetric eigensolver: Householder reduction to Hessenberg form, then
//! single-shift complex QR iteration to a Schur form `E = Z T Z^H`, and
//! eigenvectors by back-substitution on the triangular factor.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

type CMatrix = DMatrix<Complex64>;

/// Eigenvalues and (unnormalised) right eigenvectors, unsorted.
pub(crate) struct RawEigen {
    pub values: Vec<Complex64>,
    pub vectors: CMatrix,
}

fn givens(a: Complex64, b: Complex64) -> (Complex64, Complex64, Complex64, Complex64) {
    let r = (a.norm_sqr() + b.norm_sqr()).sqrt();
    if r == 0.0 {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        return (one, zero, zero, one);
    }
    // G = (1/r) [[ā, b̄], [−b, a]] so that G (a, b)ᵀ = (r, 0)ᵀ
    (a.conj() / r, b.conj() / r, -b / r, a / r)
}

/// `H ← G H` on rows `(i, i+1)` for columns `cols`.
fn rotate_rows(h: &mut CMatrix, i: usize, g: (Complex64, Complex64, Complex64, Complex64), cols: std::ops::Range<usize>) {
    for c in cols {
        let x = h[(i, c)];
        let y = h[(i + 1, c)];
        h[(i, c)] = g.0 * x + g.1 * y;
        h[(i + 1, c)] = g.2 * x + g.3 * y;
    }
}

/// `H ← H G^H` on columns `(i, i+1)` for rows `rows`.
fn rotate_cols(h: &mut CMatrix, i: usize, g: (Complex64, Complex64, Complex64, Complex64), rows: std::ops::Range<usize>) {
    for r in rows {
        let u = h[(r, i)];
        let v = h[(r, i + 1)];
        h[(r, i)] = u * g.0.conj() + v * g.1.conj();
        h[(r, i + 1)] = u * g.2.conj() + v * g.3.conj();
    }
}

fn hessenberg(a: &mut CMatrix, z: &mut CMatrix) {
    let n = a.nrows();
    for k in 0..n.saturating_sub(2) {
        let norm: f64 = (k + 1..n).map(|i| a[(i, k)].norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let phase = if x0.norm() == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            x0 / x0.norm()
        };
        let alpha = -phase * norm;
        let mut v: Vec<Complex64> = (k + 1..n).map(|i| a[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for c in &mut v {
            *c /= vnorm;
        }
        // A ← (I − 2vv^H) A
        for col in 0..n {
            let dot: Complex64 = v.iter().enumerate().map(|(t, vi)| vi.conj() * a[(k + 1 + t, col)]).sum();
            for (t, vi) in v.iter().enumerate() {
                a[(k + 1 + t, col)] -= *vi * dot * 2.0;
            }
        }
        // A ← A (I − 2vv^H), Z ← Z (I − 2vv^H)
        for m in [&mut *a, &mut *z] {
            for row in 0..n {
                let dot: Complex64 = v.iter().enumerate().map(|(t, vi)| m[(row, k + 1 + t)] * vi).sum();
                for (t, vi) in v.iter().enumerate() {
                    m[(row, k + 1 + t)] -= dot * vi.conj() * 2.0;
                }
            }
        }
        for i in k + 2..n {
            a[(i, k)] = Complex64::new(0.0, 0.0);
        }
    }
}

/// Eigenvalue of the trailing 2×2 block closest to its last diagonal entry.
fn wilkinson_shift(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Complex64 {
    let tr_half = (a + d) * 0.5;
    let det = a * d - b * c;
    let disc = (tr_half * tr_half - det).sqrt();
    let l1 = tr_half + disc;
    let l2 = tr_half - disc;
    if (l1 - d).norm() <= (l2 - d).norm() {
        l1
    } else {
        l2
    }
}

pub(crate) fn eigen(e: &DMatrix<f64>) -> Result<RawEigen> {
    let n = e.nrows();
    let mut h: CMatrix = e.map(|v| Complex64::new(v, 0.0));
    let mut z = CMatrix::identity(n, n);
    hessenberg(&mut h, &mut z);

    let max_iter = 100 * n.max(1);
    let mut total_iter = 0usize;
    let mut iter_since_deflation = 0usize;
    let mut hi = n;
    while hi > 1 {
        let last = hi - 1;
        // locate the start of the active unreduced block
        let mut lo = last;
        while lo > 0 {
            let s = h[(lo - 1, lo - 1)].norm() + h[(lo, lo)].norm();
            let scale = if s == 0.0 { 1.0 } else { s };
            if h[(lo, lo - 1)].norm() <= f64::EPSILON * scale {
                h[(lo, lo - 1)] = Complex64::new(0.0, 0.0);
                break;
            }
            lo -= 1;
        }
        if lo == last {
            hi -= 1;
            iter_since_deflation = 0;
            continue;
        }
        if total_iter >= max_iter {
            return Err(Error::EigenNotConverged {
                iterations: total_iter,
                deflated: n - hi,
                dim: n,
            });
        }
        total_iter += 1;
        iter_since_deflation += 1;

        let mu = if iter_since_deflation % 11 == 0 {
            // exceptional shift to break cycles
            h[(last, last)] + Complex64::new(h[(last, last - 1)].norm() * 0.75, 0.0)
        } else {
            wilkinson_shift(
                h[(last - 1, last - 1)],
                h[(last - 1, last)],
                h[(last, last - 1)],
                h[(last, last)],
            )
        };
        for k in lo..=last {
            h[(k, k)] -= mu;
        }
        let mut rotations = Vec::with_capacity(last - lo);
        for k in lo..last {
            let g = givens(h[(k, k)], h[(k + 1, k)]);
            rotate_rows(&mut h, k, g, k..n);
            h[(k + 1, k)] = Complex64::new(0.0, 0.0);
            rotations.push(g);
        }
        for (offset, g) in rotations.into_iter().enumerate() {
            let k = lo + offset;
            rotate_cols(&mut h, k, g, 0..(k + 2).min(hi));
            rotate_cols(&mut z, k, g, 0..n);
        }
        for k in lo..=last {
            h[(k, k)] += mu;
        }
    }

    let values: Vec<Complex64> = (0..n).map(|i| h[(i, i)]).collect();
    let norm = h.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let small = (f64::EPSILON * norm).max(f64::MIN_POSITIVE);

    // eigenvectors of the triangular factor, then back to the original basis
    let mut v = CMatrix::zeros(n, n);
    for k in 0..n {
        v[(k, k)] = Complex64::new(1.0, 0.0);
        for j in (0..k).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for m in j + 1..=k {
                s += h[(j, m)] * v[(m, k)];
            }
            let mut denom = h[(j, j)] - values[k];
            if denom.norm() < small {
                denom = Complex64::new(small, 0.0);
            }
            v[(j, k)] = -s / denom;
        }
    }
    Ok(RawEigen {
        values,
        vectors: z * v,
    })
}
