//! Contrastive density-ratio loss, its covariance form, and the VAMP-2 score.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{check_same_shape, check_square, inverse_sqrt_psd};

/// Bilinear scores `r_ij = ⟨z_i, q_j⟩` of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(pub DMatrix<f64>);

impl ScoreMatrix {
    pub fn new(z: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Self> {
        check_same_shape(z, q, "score matrix")?;
        Ok(Self(z * q.transpose()))
    }
}

/// A scalar loss of the embeddings `Z` and predictions `Q` with its gradient.
pub trait BatchLoss {
    /// Returns `(loss, ∂loss/∂Z, ∂loss/∂Q)`.
    fn value_and_grad(&self, z: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)>;
}

/// The U-statistic contrastive loss
/// `1/(B(B−1)) Σ_{i≠j} r_ij² − 2/B Σ_i r_ii`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContrastiveLoss;

fn check_batch(z: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<usize> {
    check_same_shape(z, q, "contrastive_loss")?;
    let b = z.nrows();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs a batch of at least 2 samples, got {b}"
        )));
    }
    Ok(b)
}

/// Off-diagonal squared mass and trace of the score matrix.
fn score_terms(r: &DMatrix<f64>) -> (f64, f64) {
    let b = r.nrows();
    let mut off = 0.0;
    let mut diag = 0.0;
    for j in 0..b {
        for i in 0..b {
            let v = r[(i, j)];
            if i == j {
                diag += v;
            } else {
                off += v * v;
            }
        }
    }
    (off, diag)
}

pub fn contrastive_loss(z: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let b = check_batch(z, q)? as f64;
    let r = z * q.transpose();
    let (off, diag) = score_terms(&r);
    Ok(off / (b * (b - 1.0)) - 2.0 * diag / b)
}

/// Same value as [`contrastive_loss`] computed through `d × d` Gram products,
/// for datasets too large for a `B × B` score matrix.
pub fn contrastive_loss_large(z: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let b = check_batch(z, q)? as f64;
    let zz = z.transpose() * z;
    let qq = q.transpose() * q;
    let frob2 = zz.component_mul(&qq).sum();
    let diag: Vec<f64> = z.row_iter().zip(q.row_iter()).map(|(a, c)| a.dot(&c)).collect();
    let diag_sq: f64 = diag.iter().map(|v| v * v).sum();
    let trace: f64 = diag.iter().sum();
    Ok((frob2 - diag_sq) / (b * (b - 1.0)) - 2.0 * trace / b)
}

impl BatchLoss for ContrastiveLoss {
    fn value_and_grad(&self, z: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
        let n = check_batch(z, q)?;
        let b = n as f64;
        let r = z * q.transpose();
        let (off, diag) = score_terms(&r);
        let loss = off / (b * (b - 1.0)) - 2.0 * diag / b;
        let scale = 2.0 / (b * (b - 1.0));
        let mut g = r * scale;
        for i in 0..n {
            g[(i, i)] = -2.0 / b;
        }
        let dz = &g * q;
        let dq = g.transpose() * z;
        Ok((loss, dz, dq))
    }
}

/// `Tr(Pᵀ C_X P C_Y) − 2 Tr(P C_XYᵀ)`.
pub fn analytic_loss(cx: &DMatrix<f64>, cy: &DMatrix<f64>, cxy: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    check_square(cx, "analytic_loss")?;
    for m in [cy, cxy, p] {
        check_same_shape(cx, m, "analytic_loss")?;
    }
    let quad = (p.transpose() * cx * p * cy).trace();
    let cross = p.component_mul(cxy).sum();
    Ok(quad - 2.0 * cross)
}

/// `‖(C_X+reg·I)^{-1/2} C_XY (C_Y+reg·I)^{-1/2}‖²_F`.
pub fn vamp2_score(cx: &DMatrix<f64>, cxy: &DMatrix<f64>, cy: &DMatrix<f64>, reg: f64) -> Result<f64> {
    if !(reg >= 0.0) {
        return Err(Error::InvalidArgument(format!("reg must be >= 0, got {reg}")));
    }
    check_square(cx, "vamp2_score")?;
    check_same_shape(cx, cxy, "vamp2_score")?;
    check_same_shape(cx, cy, "vamp2_score")?;
    let wx = inverse_sqrt_psd(cx, reg)?;
    let wy = inverse_sqrt_psd(cy, reg)?;
    let k = wx * cxy * wy;
    Ok(k.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::batch_covariances;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_loss(z: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
        let b = z.nrows();
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..b {
            for j in 0..b {
                let mut r = 0.0;
                for k in 0..z.ncols() {
                    r += z[(i, k)] * q[(j, k)];
                }
                if i == j {
                    diag += r;
                } else {
                    off += r * r;
                }
            }
        }
        off / (b * (b - 1)) as f64 - 2.0 * diag / b as f64
    }

    #[test]
    fn orthonormal_batch() {
        let z = DMatrix::identity(2, 2);
        assert!((contrastive_loss(&z, &z).unwrap() + 2.0).abs() < 1e-15);
        assert_eq!(contrastive_loss(&z, &DMatrix::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let z = DMatrix::zeros(1, 3);
        assert!(contrastive_loss(&z, &z).is_err());
        assert!(ContrastiveLoss.value_and_grad(&z, &z).is_err());
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random(7, 5, &mut rng);
        let q = random(7, 5, &mut rng);
        let expected = naive_loss(&z, &q);
        assert!((contrastive_loss(&z, &q).unwrap() - expected).abs() < 1e-12);
        assert!((contrastive_loss_large(&z, &q).unwrap() - expected).abs() < 1e-12);
        assert!((ContrastiveLoss.value_and_grad(&z, &q).unwrap().0 - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(5, 3, &mut rng);
        let q = random(5, 3, &mut rng);
        let (_, dz, dq) = ContrastiveLoss.value_and_grad(&z, &q).unwrap();
        let h = 1e-6;
        for idx in 0..z.len() {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fd = (naive_loss(&zp, &q) - naive_loss(&zm, &q)) / (2.0 * h);
            assert!((fd - dz[idx]).abs() < 1e-7);
            let mut qp = q.clone();
            qp[idx] += h;
            let mut qm = q.clone();
            qm[idx] -= h;
            let fd = (naive_loss(&z, &qp) - naive_loss(&z, &qm)) / (2.0 * h);
            assert!((fd - dq[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn analytic_loss_trivial_cases() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert_eq!(analytic_loss(&i, &i, &i, &DMatrix::zeros(4, 4)).unwrap(), 0.0);
        assert!((analytic_loss(&i, &i, &i, &i).unwrap() + 4.0).abs() < 1e-14);
    }

    #[test]
    fn empirical_loss_converges_to_analytic() {
        // features of i.i.d. (x, y) with y = 0.7 x + noise, both 3-dimensional
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let x = random(n, 3, &mut rng);
        let noise = random(n, 3, &mut rng);
        let y = &x * 0.7 + noise * 0.5;
        let p = random(3, 3, &mut rng);
        let (cx, cy, cxy) = batch_covariances(&x, &y).unwrap();
        let analytic = analytic_loss(&cx, &cy, &cxy, &p).unwrap();
        let empirical = contrastive_loss_large(&x, &(&y * p.transpose())).unwrap();
        assert!((analytic - empirical).abs() < 5.0 / (n as f64).sqrt(), "{analytic} vs {empirical}");
    }

    #[test]
    fn independent_one_hot_has_unit_vamp() {
        let nu = [0.2, 0.5, 0.3];
        let mu = [0.6, 0.1, 0.3];
        let cx = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&nu));
        let cy = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&mu));
        let cxy = DMatrix::from_fn(3, 3, |i, j| nu[i] * mu[j]);
        assert!((vamp2_score(&cx, &cxy, &cy, 0.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_state_chain_vamp_closed_form() {
        // Exact covariances of one-hot features: C_X = C_Y = diag(π), C_XY = diag(π) T.
        // Oracle: whitened K_ij = sqrt(π_i) T_ij / sqrt(π_j), VAMP-2 = Σ π_i T_ij² / π_j.
        let pi = [2.0 / 3.0, 1.0 / 3.0];
        let t = [[0.9, 0.1], [0.2, 0.8]];
        let mut oracle: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                oracle += pi[i] * t[i][j] * t[i][j] / pi[j];
            }
        }
        // = 1 + λ₂² with λ₂ = 0.7 for a reversible 2-state chain
        assert!((oracle - 1.49).abs() < 1e-12);
        let c = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&pi));
        let tm = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let cxy = &c * tm;
        assert!((vamp2_score(&c, &cxy, &c, 0.0).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn vamp_rejects_indefinite() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let i = DMatrix::identity(2, 2);
        assert!(matches!(vamp2_score(&bad, &i, &i, 0.0), Err(Error::NotPositiveSemidefinite { .. })));
    }

    proptest! {
        #[test]
        fn loss_is_permutation_invariant(seed in 0u64..1000, b in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random(b, 3, &mut rng);
            let q = random(b, 3, &mut rng);
            let mut perm: Vec<usize> = (0..b).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % b);
            let zp = z.select_rows(&perm);
            let qp = q.select_rows(&perm);
            let a = contrastive_loss(&z, &q).unwrap();
            let c = contrastive_loss(&zp, &qp).unwrap();
            prop_assert!((a - c).abs() < 1e-12);
        }

        #[test]
        fn analytic_loss_is_convex(seed in 0u64..1000, t in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(6, 4, &mut rng);
            let b = random(6, 4, &mut rng);
            let (cx, cy, cxy) = batch_covariances(&a, &b).unwrap();
            let p1 = random(4, 4, &mut rng);
            let p2 = random(4, 4, &mut rng);
            let mix = &p1 * t + &p2 * (1.0 - t);
            let lhs = analytic_loss(&cx, &cy, &cxy, &mix).unwrap();
            let rhs = t * analytic_loss(&cx, &cy, &cxy, &p1).unwrap() + (1.0 - t) * analytic_loss(&cx, &cy, &cxy, &p2).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }

        #[test]
        fn vamp_with_constant_feature_is_at_least_one(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 50;
            let mut x = random(n, 3, &mut rng);
            let mut y = random(n, 3, &mut rng);
            x.column_mut(0).fill(1.0);
            y.column_mut(0).fill(1.0);
            let (cx, cy, cxy) = batch_covariances(&x, &y).unwrap();
            let s = vamp2_score(&cx, &cxy, &cy, 0.0).unwrap();
            prop_assert!(s >= 1.0 - 1e-9);
        }
    }
}
