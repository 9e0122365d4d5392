mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use orthokit::correct::{
    correct_features_linear, correct_predictions_glm, correct_tensor_prediction, relu_decomposition,
};
use orthokit::evalmodel::evaluate_glm;
use orthokit::glm::{fit_glm, GlmFamily, GlmOptions, BERNOULLI, GAUSSIAN, POISSON};
use orthokit::linalg::{build_projector, with_intercept};
use orthokit::synth::pearson;
use orthokit::{DenseTensor, Matrix, Vector};

fn normal_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn family(i: usize) -> &'static dyn GlmFamily {
    [&GAUSSIAN as &'static dyn GlmFamily, &BERNOULLI, &POISSON][i]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn complement_is_idempotent_and_annihilates_x(seed in any::<u64>(), n in 4usize..30, p in 1usize..4) {
        prop_assume!(p < n);
        let x = normal_matrix(seed, n, p);
        let m = normal_matrix(seed ^ 1, n, 3);
        let proj = build_projector(&x).unwrap();
        let once = proj.apply_complement(&m).unwrap();
        let twice = proj.apply_complement(&once).unwrap();
        prop_assert!((&twice - &once).amax() <= 1e-10);
        prop_assert!(x.tr_mul(&once).amax() <= 1e-10);
        // Same operator as the explicit oracle.
        let explicit = support::complement_projector(&support::to_dense(&x));
        let oracle = support::matmul(&explicit, &support::to_dense(&m));
        for i in 0..n {
            for j in 0..3 {
                prop_assert!((oracle[i][j] - once[(i, j)]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn corrected_features_are_centered_and_orthogonal(seed in any::<u64>(), n in 8usize..40) {
        let x = normal_matrix(seed, n, 2);
        let z = normal_matrix(seed.wrapping_add(7), n, 4);
        let zc = correct_features_linear(&with_intercept(&x), &z).unwrap();
        prop_assert!(x.tr_mul(&zc).amax() <= 1e-10);
        prop_assert!(zc.row_sum().amax() <= 1e-10);
    }

    #[test]
    fn glm_prediction_correction_nulls_gaussian_slopes(seed in any::<u64>(), n in 10usize..60) {
        let x = normal_matrix(seed, n, 2);
        let y = normal_matrix(seed ^ 5, n, 1).column(0).into_owned();
        let yc = correct_predictions_glm(&x, &y, &GAUSSIAN).unwrap();
        let report = evaluate_glm(&x, &yc, &GAUSSIAN).unwrap();
        prop_assert!(report.max_abs_coefficient() <= 1e-9);
        // A second correction changes nothing.
        let again = correct_predictions_glm(&x, &yc, &GAUSSIAN).unwrap();
        prop_assert!((&again - &yc).amax() <= 1e-10);
    }

    #[test]
    fn tensor_correction_is_orthogonal_to_x(seed in any::<u64>(), n in 3usize..9, d1 in 1usize..4, d2 in 1usize..4) {
        let x = normal_matrix(seed, n, 1 + (seed % 2) as usize);
        prop_assume!(x.ncols() < n);
        let data: Vec<f64> = normal_matrix(seed ^ 9, n * d1 * d2, 1).iter().copied().collect();
        let t = DenseTensor::new(vec![n, d1, d2], data).unwrap();
        let c = correct_tensor_prediction(&x, &t).unwrap();
        prop_assert_eq!(c.dims(), t.dims());
        prop_assert!(x.tr_mul(&c.matricize()).amax() <= 1e-10);
        let round = DenseTensor::from_matricized(t.dims().to_vec(), &t.matricize()).unwrap();
        prop_assert_eq!(round, t);
    }

    #[test]
    fn relu_products_recombine_with_alternating_signs(seed in any::<u64>(), n in 1usize..50) {
        let m = normal_matrix(seed, n, 2);
        let (a, b) = (m.column(0).into_owned(), m.column(1).into_owned());
        let t = relu_decomposition(&a, &b);
        prop_assert!(t.iter().all(|&v| v >= 0.0));
        prop_assert!((a.dot(&b) - (t[0] - t[1] - t[2] + t[3])).abs() <= 1e-10 * (1.0 + a.norm() * b.norm()));
    }

    #[test]
    fn glm_fit_agrees_with_newton(seed in any::<u64>(), fam in 0usize..3) {
        let family = family(fam);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 80;
        let z = Matrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
        let y = Vector::from_fn(n, |i, _| {
            let mu = family.inverse_link(0.3 + z[(i, 0)] - 0.5 * z[(i, 1)]);
            match fam {
                0 => mu + rng.sample::<f64, _>(StandardNormal),
                1 => f64::from(u8::from(rng.random::<f64>() < mu)),
                _ => rand_distr::Distribution::sample(&rand_distr::Poisson::new(mu).unwrap(), &mut rng),
            }
        });
        // Separated bernoulli samples have no finite optimum.
        let fit = match fit_glm(&z, &y, family, &GlmOptions::default()) {
            Ok(f) if f.converged => f,
            _ => return Ok(()),
        };
        let fam_oracle = [support::Fam::Gaussian, support::Fam::Bernoulli, support::Fam::Poisson][fam];
        let oracle = support::newton_glm(fam_oracle, &support::to_dense(&with_intercept(&z)), &support::vec_of(&y));
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(seed in any::<u64>(), n in 2usize..40) {
        let m = normal_matrix(seed, n, 2);
        let (a, b) = (m.column(0).into_owned(), m.column(1).into_owned());
        let r = pearson(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((r - pearson(&b, &a)).abs() <= 1e-14);
    }
}
