//! Acceptance suite: one line per criterion, each with its wall-clock budget.
//!
//! Criteria 2 and 4 state properties that do not hold. They are computed as
//! stated and reported as FAIL; the run only errors when they unexpectedly
//! pass, or when any other criterion fails. See the README for the analysis.

mod support;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use orthokit::correct::{
    constraint_gradient, constraint_value, correct_features_linear, correct_tensor_preactivation,
    correct_tensor_prediction, corrector_by_name, relu, relu_decomposition, CorrectionProblem,
    MdmmConfig,
};
use orthokit::evalmodel::{evaluate_glm, evaluate_relu_l2, evaluate_tensor, ReluEvalOptions};
use orthokit::glm::{
    design_matrix, fit_glm, negative_log_likelihood, nll_gradient, GlmFamily, GlmOptions,
    BERNOULLI, GAUSSIAN, POISSON,
};
use orthokit::linalg::{center_columns, with_intercept};
use orthokit::online::{self, Correction, Mlp, Split};
use orthokit::synth::{self, standard_grid, generate, simulation_study, SyntheticSpec};
use orthokit::{DenseTensor, Matrix, Vector};

use support::Fam;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize) -> Vector {
    Vector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

fn fit_method(method: &str, data: &synth::SyntheticDataset, family: &'static dyn GlmFamily) -> Vector {
    let problem = CorrectionProblem {
        z: &data.z,
        y: &data.y,
        x: &data.x,
        family,
        mdmm: MdmmConfig::default(),
    };
    corrector_by_name(method)
        .and_then(|c| c.correct(&problem))
        .unwrap_or_else(|e| panic!("{method} fit failed: {e}"))
        .corrected_predictions
}

/// Linear correction, gaussian: the evaluation slopes vanish.
fn criterion_1() -> Verdict {
    let data = generate(&SyntheticSpec::new(1000, 5, 10, 2.0, &GAUSSIAN, 11)).unwrap();
    let y_hat = fit_method("linear", &data, &GAUSSIAN);
    let report = evaluate_glm(&data.x, &y_hat, &GAUSSIAN).unwrap();
    let max_beta = report.max_abs_coefficient();
    let min_p = report.min_p_value();

    // Independent check: normal-equation OLS of ŷ on [1, X].
    let d = support::to_dense(&with_intercept(&data.x));
    let dt = support::transpose(&d);
    let ols = support::solve(&support::matmul(&dt, &d), &support::matvec(&dt, &support::vec_of(&y_hat)));
    let oracle_max = ols[1..].iter().fold(0.0f64, |m, b| m.max(b.abs()));

    verdict(
        max_beta <= 1e-9 && min_p >= 0.999 && oracle_max <= 1e-9,
        format!("max|beta| = {max_beta:.2e} (oracle {oracle_max:.2e}), min p = {min_p:.6}"),
    )
}

/// Linear correction, bernoulli: the activated predictions still depend on X.
fn criterion_2() -> Verdict {
    let data = generate(&SyntheticSpec::new(1000, 5, 10, 2.0, &BERNOULLI, 11)).unwrap();
    let y_hat = fit_method("linear", &data, &BERNOULLI);
    let report = evaluate_glm(&data.x, &y_hat, &BERNOULLI).unwrap();
    let min_p = report.min_p_value();
    verdict(min_p < 0.01, format!("min p = {min_p:.4} (needs < 0.01)"))
}

/// Constrained GLM over the full simulation grid of both families.
fn criterion_3() -> Verdict {
    let mut grid = standard_grid(&BERNOULLI, 0);
    grid.extend(standard_grid(&POISSON, 1000));
    let table = simulation_study(&grid, 10, &MdmmConfig::default()).unwrap();

    // Per cell: estimates and p-values pooled over replicates and
    // coefficients, residual per replicate; a failed replicate is infeasible.
    #[derive(Default)]
    struct Cell {
        estimates: Vec<f64>,
        p_values: Vec<f64>,
        residuals: BTreeMap<u64, f64>,
    }
    let mut cells: BTreeMap<String, Cell> = BTreeMap::new();
    for row in table.rows.iter().filter(|r| r.method == "glm-constrained") {
        let cell = cells.entry(row.setting.clone()).or_default();
        if row.error.is_empty() {
            cell.estimates.push(row.estimate.abs());
            cell.p_values.push(row.p_value);
            cell.residuals.insert(row.replicate, row.constraint_residual);
        } else {
            cell.residuals.insert(row.replicate, f64::INFINITY);
        }
    }
    let median = |mut v: Vec<f64>| {
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
    };
    let mut passing = 0;
    let mut failing = Vec::new();
    for (label, cell) in &cells {
        let beta = median(cell.estimates.clone());
        let p = median(cell.p_values.clone());
        let resid = median(cell.residuals.values().copied().collect());
        if beta <= 1e-2 && p >= 0.9 && resid <= 1e-6 {
            passing += 1;
        } else {
            failing.push(format!("{label} (beta {beta:.1e}, p {p:.3}, resid {resid:.1e})"));
        }
    }
    let share = passing as f64 / cells.len() as f64;
    let mut detail = format!("{passing}/{} cells pass ({:.1}%, needs >= 95%)", cells.len(), 100.0 * share);
    if !failing.is_empty() {
        detail.push_str(&format!("; failing: {}", failing.join(", ")));
    }
    verdict(cells.len() == 72 && share >= 0.95, detail)
}

/// ReLU statements, checked exactly as formulated.
fn criterion_4() -> Verdict {
    let (mut identity_as_stated, mut identity_signed, mut mixed, mut norm) = (0usize, 0usize, 0usize, 0usize);
    let mut worst_mixed = 0.0f64;
    let mut worst_norm = 0.0f64;
    let opts = ReluEvalOptions::default();
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p, q) = (40, 3, 6);
        let z = normal_matrix(&mut rng, n, q);
        let x = normal_matrix(&mut rng, n, p);
        let zc = correct_features_linear(&x, &z).unwrap();
        let gamma = normal_vector(&mut rng, q);
        let beta = normal_vector(&mut rng, p);
        let a = &zc * &gamma;
        let b = &x * &beta;
        let inner = a.dot(&b);
        let t = relu_decomposition(&a, &b);
        // The stated identity adds all four products.
        if (inner - (t[0] + t[1] + t[2] + t[3])).abs() <= 1e-10 {
            identity_as_stated += 1;
        }
        if (inner - (t[0] - t[1] - t[2] + t[3])).abs() <= 1e-10 {
            identity_signed += 1;
        }
        let m = a.map(relu).dot(&b.map(relu));
        worst_mixed = worst_mixed.max(m);
        if m <= 1e-10 {
            mixed += 1;
        }
        let y_hat = a.map(relu);
        let eval = evaluate_relu_l2(&x, &y_hat, &opts).unwrap();
        worst_norm = worst_norm.max(eval.relu_norm);
        if eval.relu_norm <= 1e-6 {
            norm += 1;
        }
    }
    verdict(
        identity_as_stated == 200 && mixed == 200 && norm == 200,
        format!(
            "identity as stated {identity_as_stated}/200 (signed form {identity_signed}/200), \
             mixed term {mixed}/200 (max {worst_mixed:.3}), relu_norm {norm}/200 (max {worst_norm:.3})"
        ),
    )
}

/// Column-stacked vectorization of the mode-1 matricization.
fn vec_mode1(t: &DenseTensor) -> Vec<f64> {
    let m = t.matricize();
    (0..m.ncols()).flat_map(|j| (0..m.nrows()).map(move |i| (i, j))).map(|(i, j)| m[(i, j)]).collect()
}

/// Mode-1 tensor projections against an explicit Kronecker product.
fn criterion_5() -> Verdict {
    let mut worst_frob = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(4..=8);
        let p = rng.random_range(1..n);
        let order = rng.random_range(1..=3);
        let mut dims = vec![n];
        let mut budget = 64 / n;
        for _ in 0..order {
            let d = rng.random_range(1..=budget.clamp(1, 4));
            dims.push(d);
            budget /= d;
        }
        let len: usize = dims.iter().product();
        assert!(len <= 64);
        let data: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let t = DenseTensor::new(dims, data).unwrap();
        let x = normal_matrix(&mut rng, n, p);

        let proj = support::complement_projector(&support::to_dense(&x));
        let kron = support::kron(&support::identity(t.trailing_len()), &proj);
        let expected = support::matvec(&kron, &vec_mode1(&t));

        for corrected in [
            correct_tensor_prediction(&x, &t).unwrap(),
            correct_tensor_preactivation(&x, &t).unwrap(),
        ] {
            worst_frob = worst_frob.max(evaluate_tensor(&x, &corrected).unwrap().frobenius);
            let got = vec_mode1(&corrected);
            let gap = got.iter().zip(&expected).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst_oracle = worst_oracle.max(gap);
        }
    }
    verdict(
        worst_frob <= 1e-8 && worst_oracle <= 1e-10,
        format!("max Frobenius {worst_frob:.2e}, max Kronecker gap {worst_oracle:.2e}"),
    )
}

fn glm_problem(fam: Fam, family: &'static dyn GlmFamily, seed: u64) -> (Matrix, Vector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, q) = (150, 4);
    let z = normal_matrix(&mut rng, n, q);
    let beta = normal_vector(&mut rng, q + 1) * 0.5;
    let eta = with_intercept(&z) * beta;
    let y = Vector::from_fn(n, |i, _| {
        let mu = family.inverse_link(eta[i]);
        match fam {
            Fam::Gaussian => mu + rng.sample::<f64, _>(StandardNormal),
            Fam::Bernoulli => f64::from(u8::from(rng.random::<f64>() < mu)),
            Fam::Poisson => rand_distr::Distribution::sample(&rand_distr::Poisson::new(mu).unwrap(), &mut rng),
        }
    });
    (z, y)
}

fn rel_gap(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn central_difference(f: impl Fn(&Vector) -> f64, at: &Vector, h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|k| {
            let mut up = at.clone();
            let mut down = at.clone();
            up[k] += h;
            down[k] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// IRLS against Newton, analytic gradients against differences, and the
/// intercept-only closed form.
fn criterion_6() -> Verdict {
    let families: [(Fam, &'static dyn GlmFamily); 3] =
        [(Fam::Gaussian, &GAUSSIAN), (Fam::Bernoulli, &BERNOULLI), (Fam::Poisson, &POISSON)];
    let mut worst_newton = 0.0f64;
    let mut worst_grad = 0.0f64;
    let mut worst_closed = 0.0f64;
    for (fam, family) in families {
        for seed in 0..20u64 {
            let (z, y) = glm_problem(fam, family, 500 + seed);
            let fit = fit_glm(&z, &y, family, &GlmOptions::default()).unwrap();
            let design = design_matrix(&z, true);
            let oracle = support::newton_glm(fam, &support::to_dense(&design), &support::vec_of(&y));
            let gap = fit.coefficients.iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst_newton = worst_newton.max(gap);

            // Gradients at a point away from the optimum.
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let at = normal_vector(&mut rng, design.ncols()) * 0.3;
            let analytic = nll_gradient(family, &design, &y, &at);
            let numeric = central_difference(|b| negative_log_likelihood(family, &y, &(&design * b)), &at, 1e-6);
            worst_grad = worst_grad.max(rel_gap(analytic.as_slice(), &numeric));

            let xc = center_columns(&normal_matrix(&mut rng, z.nrows(), 2));
            let analytic = constraint_gradient(&at, &design, &xc, family);
            let numeric = central_difference(|g| constraint_value(g, &design, &xc, family), &at, 1e-6);
            worst_grad = worst_grad.max(rel_gap(analytic.as_slice(), &numeric));

            let empty = Matrix::zeros(y.len(), 0);
            let only = fit_glm(&empty, &y, family, &GlmOptions::default()).unwrap();
            worst_closed = worst_closed.max((only.coefficients[0] - fam.link(y.mean())).abs());
        }
    }
    verdict(
        worst_newton <= 1e-6 && worst_grad <= 1e-4 && worst_closed <= 1e-10,
        format!(
            "IRLS vs Newton {worst_newton:.2e}, gradient rel. gap {worst_grad:.2e}, intercept-only {worst_closed:.2e}"
        ),
    )
}

/// Finite-difference check of backprop through a projected layer.
fn mlp_gradient_gap() -> f64 {
    let data = online::make_confounded_data(40, 10, 6, 0.1, 5).unwrap();
    let idx: Vec<usize> = data.indices(Split::Train).into_iter().take(12).collect();
    let (x, c, y) = data.rows(&idx);
    let design = online::protected_design(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = Mlp::init(&[x.ncols(), 10, 6, 1], &mut rng);
    let mut worst = 0.0f64;
    for corr in [Correction::None, Correction::Batch(&design)] {
        let (_, grad) = net.loss_and_gradient(&x, &y, 0, corr).unwrap();
        let loss_at = |m: &Mlp| m.loss_and_gradient(&x, &y, 0, corr).unwrap().0;
        for l in 0..net.weights.len() {
            let flat_w: Vector = Vector::from_column_slice(net.weights[l].as_slice());
            let numeric = central_difference(
                |w| {
                    let mut m = net.clone();
                    m.weights[l].copy_from_slice(w.as_slice());
                    loss_at(&m)
                },
                &flat_w,
                1e-6,
            );
            worst = worst.max(rel_gap(grad.weights[l].as_slice(), &numeric));
            let numeric = central_difference(
                |b| {
                    let mut m = net.clone();
                    m.biases[l] = b.clone();
                    loss_at(&m)
                },
                &net.biases[l],
                1e-6,
            );
            worst = worst.max(rel_gap(grad.biases[l].as_slice(), &numeric));
        }
    }
    worst
}

/// Online correction on the confounded demo instance.
fn criterion_7() -> Verdict {
    let (data, cfg) = online::demo_instance(0).unwrap();
    let plain = online::train_mlp(&data, &cfg, false).unwrap();
    let fixed = online::train_mlp(&data, &cfg, true).unwrap();
    let acc_plain = online::accuracy(&plain, &data, Split::Test).unwrap();
    let acc_fixed = online::accuracy(&fixed, &data, Split::Test).unwrap();
    let p = fixed.confounder_evaluation.min_p_value();
    let grad = mlp_gradient_gap();
    verdict(
        acc_plain <= 0.65 && acc_fixed >= acc_plain + 0.10 && p > 0.05 && grad <= 1e-4,
        format!(
            "test accuracy {acc_plain:.3} -> {acc_fixed:.3}, confounder p = {p:.3}, gradient rel. gap {grad:.2e}"
        ),
    )
}

/// The constraint costs little accuracy when Z carries signal beyond X.
fn criterion_8() -> Verdict {
    let mut spec = SyntheticSpec::new(1000, 5, 10, 1.0, &BERNOULLI, 21);
    spec.true_gamma = Some(Vector::from_fn(10, |j, _| if j < 5 { 0.3 } else { 1.0 }));
    let data = generate(&spec).unwrap();
    let accuracy = |pred: &Vector| {
        pred.iter().zip(data.y.iter()).filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5)).count() as f64
            / data.y.len() as f64
    };
    let free = accuracy(&fit_method("uncorrected", &data, &BERNOULLI));
    let constrained = accuracy(&fit_method("glm-constrained", &data, &BERNOULLI));
    verdict(
        free - constrained <= 0.05,
        format!("train accuracy {free:.3} unconstrained, {constrained:.3} constrained"),
    )
}

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    /// The property as stated is false; FAIL is the correct outcome.
    known_false: bool,
    run: fn() -> Verdict,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "linear correction nulls gaussian slopes", budget: Duration::from_secs(1), known_false: false, run: criterion_1 },
        Criterion { id: 2, name: "linear correction fails after activation", budget: Duration::from_secs(5), known_false: true, run: criterion_2 },
        Criterion { id: 3, name: "constrained GLM on the simulation grid", budget: Duration::from_secs(600), known_false: false, run: criterion_3 },
        Criterion { id: 4, name: "ReLU orthogonality statements", budget: Duration::from_secs(30), known_false: true, run: criterion_4 },
        Criterion { id: 5, name: "tensor corrections", budget: Duration::from_secs(10), known_false: false, run: criterion_5 },
        Criterion { id: 6, name: "GLM engine", budget: Duration::from_secs(30), known_false: false, run: criterion_6 },
        Criterion { id: 7, name: "online correction demo", budget: Duration::from_secs(120), known_false: false, run: criterion_7 },
        Criterion { id: 8, name: "accuracy cost of the constraint", budget: Duration::from_secs(60), known_false: false, run: criterion_8 },
    ];
    let filter: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let v = (c.run)();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = v.pass && in_budget;
        let note = match (pass, c.known_false) {
            (false, true) => " [known false, expected]",
            (true, true) => " [known false but passed: investigate]",
            _ => "",
        };
        if pass == c.known_false {
            unexpected += 1;
        }
        println!(
            "criterion {}: {} - {} ({:.2}s of {}s){} | {}",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            note,
            v.detail
        );
        if !in_budget {
            println!("criterion {}: over the runtime budget", c.id);
        }
    }
    if unexpected == 0 {
        println!("acceptance: all criteria as expected");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {unexpected} unexpected outcome(s)");
        ExitCode::FAILURE
    }
}
