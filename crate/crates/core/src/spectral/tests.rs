use super::*;
use crate::dynamics::{make_pairs, markov_chain_pairs, ou_trajectory, OuParams, Trajectory};
use crate::encoder::{Activation, Encoder, EncoderConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn random_matrix(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
}

fn cfrob(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

fn check_invariants(e: &DMatrix<f64>, s: &SpectralDecomposition) {
    let n = e.nrows();
    let ec = e.map(|v| c(v, 0.0));
    let enorm = crate::linalg::frobenius(e).max(1e-300);
    for i in 0..n {
        let q = s.right_eigenvectors.column(i);
        let r = &ec * q - q * s.eigenvalues[i];
        assert!(r.norm() <= 1e-8 * enorm, "residual {} for mode {i}", r.norm());
    }
    let id = &s.right_eigenvectors * &s.inverse_basis - DMatrix::<Complex64>::identity(n, n);
    assert!(cfrob(&id) < 1e-8);
    let recon = &s.right_eigenvectors * DMatrix::from_diagonal(&DVector::from_vec(s.eigenvalues.clone())) * &s.inverse_basis;
    assert!(cfrob(&(recon - ec)) <= 1e-8 * enorm);
    for w in s.eigenvalues.windows(2) {
        assert!(w[0].norm() >= w[1].norm() - 1e-12);
    }
}

#[test]
fn diagonal_spectrum() {
    let e = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.9]);
    let s = eig(&e, 1.0).unwrap();
    assert_eq!(s.eigenvalues, vec![c(0.9, 0.0), c(0.5, 0.0)]);
    assert!((s.right_eigenvectors[(1, 0)] - c(1.0, 0.0)).norm() < 1e-14);
    assert!((s.right_eigenvectors[(0, 1)] - c(1.0, 0.0)).norm() < 1e-14);
    check_invariants(&e, &s);
}

#[test]
fn rotation_spectrum() {
    let t = std::f64::consts::FRAC_PI_4;
    let e = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
    let s = eig(&e, 1.0).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((s.eigenvalues[0] - c(h, h)).norm() < 1e-12);
    assert!((s.eigenvalues[1] - c(h, -h)).norm() < 1e-12);
    check_invariants(&e, &s);
}

#[test]
fn identity_and_repeated_eigenvalues() {
    let e = DMatrix::<f64>::identity(4, 4);
    let s = eig(&e, 1.0).unwrap();
    check_invariants(&e, &s);
    let j = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
    check_invariants(&j, &eig(&j, 1.0).unwrap());
}

/// Roots of `x³ + a x² + b x + c` by bisection for a real root, then the
/// quadratic formula on the deflated polynomial.
fn cubic_roots(a: f64, b: f64, cc: f64) -> Vec<Complex64> {
    let p = |x: f64| ((x + a) * x + b) * x + cc;
    let bound = 1.0 + a.abs().max(b.abs()).max(cc.abs());
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p(lo) * p(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    // x³ + a x² + b x + c = (x − r)(x² + (a + r) x + (b + r(a + r)))
    let q1 = a + r;
    let q0 = b + r * q1;
    let disc = c(q1 * q1 - 4.0 * q0, 0.0).sqrt();
    vec![c(r, 0.0), (c(-q1, 0.0) + disc) / 2.0, (c(-q1, 0.0) - disc) / 2.0]
}

#[test]
fn random_3x3_matches_characteristic_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let m = random_matrix(3, &mut rng);
        // det(xI − M) = x³ − tr x² + (sum of principal 2-minors) x − det
        let tr = m.trace();
        let minors = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)] + m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]
            + m[(1, 1)] * m[(2, 2)]
            - m[(1, 2)] * m[(2, 1)];
        let det = m.determinant();
        let mut oracle = cubic_roots(-tr, minors, -det);
        let s = eig(&m, 1.0).unwrap();
        for l in &s.eigenvalues {
            let (k, dist) = oracle
                .iter()
                .enumerate()
                .map(|(k, r)| (k, (r - l).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(dist < 1e-8, "eigenvalue {l} vs oracle {:?}", oracle);
            oracle.remove(k);
        }
        check_invariants(&m, &s);
    }
}

#[test]
fn timescale_and_frequency_values() {
    assert!((implied_timescale(c((-1.0f64).exp(), 0.0), 1.0) - 1.0).abs() < 1e-12);
    assert!((implied_timescale(c(0.5, 0.0), 1.0) - 1.442695040888963).abs() < 1e-12);
    assert_eq!(implied_timescale(c(1.0, 0.0), 1.0), f64::INFINITY);
    assert_eq!(implied_timescale(c(0.0, 1.2), 1.0), f64::INFINITY);
    assert_eq!(implied_timescale(c(0.0, 0.0), 1.0), 0.0);
    assert!((mode_frequency(c(-1.0, 0.0), 1.0) - 0.5).abs() < 1e-15);
    assert_eq!(mode_frequency(c(0.7, 0.0), 1.0), 0.0);
    let f = mode_frequency(c(0.86, 0.50), 1.0 / 12.0);
    assert!((f - 1.006).abs() < 5e-4, "{f}");
}

#[test]
fn timescale_monotone_in_modulus() {
    let mut prev = 0.0;
    for k in 1..100 {
        let t = implied_timescale(c(k as f64 / 100.0, 0.0), 0.1);
        assert!(t > prev);
        prev = t;
    }
}

#[test]
fn eigenfunctions_of_diagonal_operator() {
    let e = DMatrix::from_diagonal(&DVector::from_vec(vec![0.9, 0.6, 0.3]));
    let s = eig(&e, 1.0).unwrap();
    for i in 0..3 {
        let mut z = DVector::zeros(3);
        z[i] = 1.0;
        for j in 0..3 {
            let psi = s.eigenfunction(j, &z).unwrap();
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((psi - c(expected, 0.0)).norm() < 1e-14);
        }
    }
    assert!(s.eigenfunction(3, &DVector::zeros(3)).is_err());
}

#[test]
fn mode_sum_matches_matrix_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = random_matrix(4, &mut rng);
    let s = eig(&e, 1.0).unwrap();
    let w = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
    let z = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
    let direct = (&e * &e * &e * &w).dot(&z);
    let md = s.mode_decomposition(&w, &z, 3).unwrap();
    assert!((md.total() - c(direct, 0.0)).norm() < 1e-8);
    assert!(!md.ill_conditioned);
    let one = s.mode_decomposition(&w, &z, 1).unwrap();
    assert!((one.total().re - (&e * &w).dot(&z)).abs() < 1e-10);
    assert!(s.mode_decomposition(&w, &z, 0).is_err());
}

#[test]
fn diagonal_operator_single_mode() {
    let e = DMatrix::from_diagonal(&DVector::from_vec(vec![0.9, 0.5]));
    let s = eig(&e, 1.0).unwrap();
    let w = DVector::from_vec(vec![0.0, 1.0]);
    let z = DVector::from_vec(vec![0.3, 0.7]);
    let md = s.mode_decomposition(&w, &z, 2).unwrap();
    let nonzero: Vec<_> = md.modes.iter().filter(|m| m.contribution.norm() > 1e-15).collect();
    assert_eq!(nonzero.len(), 1);
    assert!((nonzero[0].contribution.re - 0.25 * 0.7).abs() < 1e-14);
}

#[test]
fn filter_by_decorrelation() {
    let lambdas = [0.99, 0.9, 0.5, 0.1];
    let e = DMatrix::from_diagonal(&DVector::from_row_slice(&lambdas));
    let s = eig(&e, 1.0).unwrap();
    assert_eq!(s.filter(0.0).unwrap().eigenvalues, s.eigenvalues);
    // τ = 99.5, 9.49, 1.44, 0.434
    let kept = s.filter(1.0).unwrap();
    assert_eq!(kept.indices, vec![0, 1, 2]);
    assert_eq!(kept.eigenvalues.len(), 3);
    let zero = eig(&DMatrix::zeros(3, 3), 1.0).unwrap();
    assert!(zero.filter(1e-3).unwrap().is_empty());
    assert!(s.filter(-1.0).is_err());
}

#[test]
fn spectrum_rows_and_csv() {
    let e = DMatrix::from_diagonal(&DVector::from_vec(vec![0.9, 0.5]));
    let rows = eig(&e, 1.0).unwrap().spectrum_rows();
    assert_eq!(rows.len(), 2);
    assert!((rows[0].decorrelation - (-1.0 / 0.9f64.ln())).abs() < 1e-12);
    let mut buf = Vec::new();
    write_spectrum_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("idx,Re,Im,Abs,decorrelation,frequency\n0,0.9,0,0.9,"));
}

fn model_from(matrix: DMatrix<f64>) -> EvolutionOperatorModel {
    let d = matrix.nrows();
    EvolutionOperatorModel {
        matrix,
        ridge: 0.0,
        lag_time: 1.0,
        source: OperatorSource::FullPass,
        covariances: Covariances::zeros(d),
    }
}

#[test]
fn markov_chain_oracle() {
    let t = DMatrix::from_row_slice(3, 3, &[0.8, 0.15, 0.05, 0.1, 0.7, 0.2, 0.25, 0.25, 0.5]);
    let pairs = markov_chain_pairs(&t, 100_000, 2).unwrap();
    let covs = Covariances::from_features(&pairs.x_matrix(), &pairs.y_matrix()).unwrap();
    let model = EvolutionOperatorModel::fit(covs, 0.0, 1.0, OperatorSource::FullPass).unwrap();
    let s = eig(&model.matrix, 1.0).unwrap();
    assert!((s.eigenvalues[0] - c(1.0, 0.0)).norm() < 0.01);
    let psi: Vec<Complex64> = (0..3)
        .map(|k| {
            let mut z = DVector::zeros(3);
            z[k] = 1.0;
            s.eigenfunction(0, &z).unwrap()
        })
        .collect();
    for p in &psi {
        assert!((p - psi[0]).norm() < 0.01);
    }
    // w = indicator of state j predicts P[X₁ = j | x] = T(x, j)
    let z = DMatrix::<f64>::identity(3, 3);
    let pred = forecast(&model, &z, &DMatrix::identity(3, 3)).unwrap();
    assert!((pred - &t).amax() < 0.01);
}

#[test]
fn identity_operator_keeps_observable() {
    let model = model_from(DMatrix::identity(3, 3));
    let z = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
    let w = DMatrix::from_row_slice(3, 1, &[0.2, -1.0, 4.0]);
    let pred = forecast(&model, &z, &w).unwrap();
    assert_eq!(pred, &z * &w);
}

#[test]
fn forecast_needs_passthrough() {
    let config = EncoderConfig {
        input_dim: 2,
        hidden_dims: vec![4],
        latent_dim: 3,
        activation: Activation::Tanh,
        append_raw_state: false,
        simnorm_group: 0,
        seed: 0,
        input_scaling: None,
    };
    let (enc, _) = Encoder::initialized(config).unwrap();
    let model = model_from(DMatrix::identity(3, 3));
    let err = forecast_state(&model, &enc, &DMatrix::zeros(1, 2)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn linls_recovers_linear_dynamics() {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut x = DVector::from_vec(vec![1.0, 0.0]);
    let mut data = Vec::new();
    for _ in 0..20_000 {
        data.extend(x.iter().copied());
        let noise = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
        x = &a * x + noise;
    }
    let traj = Trajectory::new(data, 2, 1.0).unwrap();
    let pairs = make_pairs(&traj, 1, 0).unwrap();
    let (model, _) = linls_baseline(&pairs, 0.0).unwrap();
    // ⟨E w, [x,1]⟩ = (A x)·w means the state block of E equals Aᵀ
    let block = model.matrix.view((0, 0), (2, 2)).transpose();
    assert!((block - &a).amax() < 0.02, "{}", model.matrix);
}

#[test]
fn linls_constant_trajectory() {
    let traj = Trajectory::new([2.0, -1.0].repeat(50), 2, 1.0).unwrap();
    let pairs = make_pairs(&traj, 1, 0).unwrap();
    let (model, features) = linls_baseline(&pairs, 1e-6).unwrap();
    let m = forecast_rmse(&model, &features, &pairs).unwrap();
    assert!(m.aggregate < 1e-4, "{m:?}");
}

#[test]
fn ou_slowest_mode_timescale() {
    let p = OuParams { theta: 1.0, sigma: 1.0 };
    let traj = ou_trajectory(50_000, 0.1, p, 0.0, 1).unwrap();
    let pairs = make_pairs(&traj, 1, 0).unwrap();
    let (model, _) = linls_baseline(&pairs, 0.0).unwrap();
    let s = eig(&model.matrix, pairs.dt_effective()).unwrap();
    assert!((s.eigenvalues[0].re - 1.0).abs() < 1e-3);
    let tau = implied_timescale(s.eigenvalues[1], s.lag_time);
    assert!((tau - 1.0).abs() < 0.1, "tau {tau}");
}

proptest! {
    #[test]
    fn decomposition_invariants(seed in 0u64..10_000, d in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_matrix(d, &mut rng);
        let s = eig(&e, 1.0).unwrap();
        check_invariants(&e, &s);
        // closed under conjugation
        for l in &s.eigenvalues {
            prop_assert!(s.eigenvalues.iter().any(|m| (m - l.conj()).norm() < 1e-12));
        }
        let w = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let z = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mut ep = DMatrix::identity(d, d);
        for steps in 1..=5u32 {
            ep = &ep * &e;
            let direct = (&ep * &w).dot(&z);
            let total = s.mode_decomposition(&w, &z, steps).unwrap().total();
            prop_assert!((total.re - direct).abs() <= 1e-6 * direct.abs().max(1.0));
            prop_assert!(total.im.abs() <= 1e-6 * direct.abs().max(1.0));
        }
    }
}
