//! Synthetic data with protected features correlated to the model features,
//! a simulation study over a grid of designs, and the two-feature trajectory
//! demonstration.
//!
//! # Random streams
//!
//! Every dataset is drawn from a `ChaCha8Rng` seeded with the cell's `seed`
//! and positioned on stream `replicate` (stream 0 for [`generate`]). Draws
//! happen in a fixed order: `Z` row by row, then `E` row by row, then `γ`
//! (only when not supplied), then one response per row.

use std::collections::BTreeMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::correct::{
    corrector_by_name, fit_constrained_glm, CorrectionProblem, MdmmConfig,
};
use crate::error::{OrthoError, Result};
use crate::evalmodel::evaluate_glm;
use crate::glm::{GlmFamily, BERNOULLI};
use crate::linalg::{self, Matrix, Vector};

/// Poisson linear predictors are clipped to this magnitude before `exp`.
pub const POISSON_ETA_CLIP: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub rho: f64,
    pub family: &'static dyn GlmFamily,
    pub seed: u64,
    /// Drawn from `N(0, 1/q)` when absent.
    pub true_gamma: Option<Vector>,
}

impl SyntheticSpec {
    pub fn new(n: usize, p: usize, q: usize, rho: f64, family: &'static dyn GlmFamily, seed: u64) -> Self {
        SyntheticSpec {
            n,
            p,
            q,
            rho,
            family,
            seed,
            true_gamma: None,
        }
    }

    /// Stable identifier used in study tables.
    pub fn label(&self) -> String {
        format!("{}_n{}_p{}_q{}_rho{}", self.family.name(), self.n, self.p, self.q, self.rho)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.q < self.p {
            return Err(OrthoError::InvalidSpec(format!(
                "need n >= 1 and q >= p >= 1, got n={}, p={}, q={}",
                self.n, self.p, self.q
            )));
        }
        if !self.rho.is_finite() {
            return Err(OrthoError::InvalidSpec("rho must be finite".into()));
        }
        if let Some(g) = &self.true_gamma {
            if g.len() != self.q {
                return Err(OrthoError::dims("true gamma length", self.q, g.len()));
            }
            linalg::check_finite_vec(g, "true gamma")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub z: Matrix,
    pub x: Matrix,
    pub y: Vector,
    pub true_gamma: Vector,
}

/// Draws `X = ρ Z[:, :p] + E` and `y ~ family(h(Zγ))` on stream 0.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    generate_replicate(spec, 0)
}

pub fn generate_replicate(spec: &SyntheticSpec, replicate: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let SyntheticSpec { n, p, q, rho, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(replicate);

    let normal = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let flat: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_row_slice(rows, cols, &flat)
    };
    let z = normal(n, q, &mut rng);
    let e = normal(n, p, &mut rng);
    let x = z.columns(0, p) * rho + e;
    let true_gamma = match &spec.true_gamma {
        Some(g) => g.clone(),
        None => {
            let scale = 1.0 / (q as f64).sqrt();
            Vector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
        }
    };
    let eta = &z * &true_gamma;
    let y = sample_response(spec.family, &eta, &mut rng)?;
    Ok(SyntheticDataset { z, x, y, true_gamma })
}

fn sample_response(family: &dyn GlmFamily, eta: &Vector, rng: &mut ChaCha8Rng) -> Result<Vector> {
    let mut y = Vector::zeros(eta.len());
    for (yi, &e) in y.iter_mut().zip(eta.iter()) {
        *yi = match family.name() {
            "gaussian" => e + rng.sample::<f64, _>(StandardNormal),
            "bernoulli" => f64::from(u8::from(rng.random::<f64>() < family.inverse_link(e))),
            "poisson" => {
                let rate = family.inverse_link(e.clamp(-POISSON_ETA_CLIP, POISSON_ETA_CLIP));
                Poisson::new(rate)
                    .map_err(|err| OrthoError::Domain(format!("poisson rate {rate}: {err}")))?
                    .sample(rng)
            }
            other => return Err(OrthoError::InvalidSpec(format!("no sampler for family {other}"))),
        };
    }
    Ok(y)
}

/// Methods compared in a study, by corrector name.
pub const STUDY_METHODS: [&str; 3] = ["uncorrected", "linear", "glm-constrained"];

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StudyRow {
    pub setting: String,
    pub replicate: u64,
    pub method: String,
    pub coefficient_index: usize,
    pub estimate: f64,
    pub p_value: f64,
    /// `‖Xcᵀ ŷ‖²` of the evaluated predictions.
    pub constraint_residual: f64,
    /// Empty unless the method failed on this replicate.
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SummaryRow {
    pub setting: String,
    pub method: String,
    pub median_abs_estimate: f64,
    pub median_p_value: f64,
    pub fraction_significant: f64,
    /// Share of replicates whose constraint residual is at most 1e-6.
    pub fraction_feasible: f64,
    pub failures: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl StudyTable {
    /// Per setting and method: medians over all coefficients and replicates,
    /// the share of significant coefficients at `alpha`, and feasibility.
    pub fn summarize(&self, alpha: f64) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(String, String), Vec<&StudyRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry((row.setting.clone(), row.method.clone())).or_default().push(row);
        }
        groups
            .into_iter()
            .map(|((setting, method), rows)| {
                let ok: Vec<&&StudyRow> = rows.iter().filter(|r| r.error.is_empty()).collect();
                let mut reps: BTreeMap<u64, f64> = BTreeMap::new();
                for r in &ok {
                    reps.insert(r.replicate, r.constraint_residual);
                }
                let failed: std::collections::BTreeSet<u64> =
                    rows.iter().filter(|r| !r.error.is_empty()).map(|r| r.replicate).collect();
                let n_reps = reps.len() + failed.len();
                SummaryRow {
                    median_abs_estimate: median(ok.iter().map(|r| r.estimate.abs()).collect()),
                    median_p_value: median(ok.iter().map(|r| r.p_value).collect()),
                    fraction_significant: if ok.is_empty() {
                        f64::NAN
                    } else {
                        ok.iter().filter(|r| r.p_value < alpha).count() as f64 / ok.len() as f64
                    },
                    fraction_feasible: reps.values().filter(|&&a| a <= 1e-6).count() as f64
                        / n_reps.max(1) as f64,
                    failures: failed.len(),
                    setting,
                    method,
                }
            })
            .collect()
    }
}

fn run_replicate(spec: &SyntheticSpec, replicate: u64, mdmm: &MdmmConfig) -> Vec<StudyRow> {
    let setting = spec.label();
    let error_rows = |method: &str, msg: String| -> Vec<StudyRow> {
        (0..spec.p)
            .map(|j| StudyRow {
                setting: setting.clone(),
                replicate,
                method: method.to_string(),
                coefficient_index: j + 1,
                estimate: f64::NAN,
                p_value: f64::NAN,
                constraint_residual: f64::NAN,
                error: msg.clone(),
            })
            .collect()
    };

    let data = match generate_replicate(spec, replicate) {
        Ok(d) => d,
        Err(e) => return STUDY_METHODS.iter().flat_map(|m| error_rows(m, e.to_string())).collect(),
    };
    let problem = CorrectionProblem {
        z: &data.z,
        y: &data.y,
        x: &data.x,
        family: spec.family,
        mdmm: *mdmm,
    };
    let mut rows = Vec::with_capacity(STUDY_METHODS.len() * spec.p);
    for method in STUDY_METHODS {
        let outcome = corrector_by_name(method).and_then(|c| c.correct(&problem));
        let result = outcome.and_then(|out| {
            let report = evaluate_glm(&data.x, &out.corrected_predictions, spec.family)?;
            Ok((out, report))
        });
        match result {
            Ok((out, report)) => {
                for (j, row) in report.slopes.iter().enumerate() {
                    rows.push(StudyRow {
                        setting: setting.clone(),
                        replicate,
                        method: method.to_string(),
                        coefficient_index: j + 1,
                        estimate: row.estimate,
                        p_value: row.p_value,
                        constraint_residual: out.constraint_residual,
                        error: String::new(),
                    });
                }
            }
            Err(e) => {
                warn!("{setting} replicate {replicate} {method}: {e}");
                rows.extend(error_rows(method, e.to_string()));
            }
        }
    }
    rows
}

/// Runs every method on every cell and replicate. Failures become rows with
/// an error message; rows are ordered by cell, replicate, method, coefficient.
pub fn simulation_study(grid: &[SyntheticSpec], replicates: u64, mdmm: &MdmmConfig) -> Result<StudyTable> {
    if grid.is_empty() {
        return Err(OrthoError::InvalidSpec("simulation grid is empty".into()));
    }
    for spec in grid {
        spec.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|c| (0..replicates).map(move |r| (c, r)))
        .collect();
    let chunks: Vec<Vec<StudyRow>> = jobs
        .par_iter()
        .map(|&(c, r)| run_replicate(&grid[c], r, mdmm))
        .collect();
    Ok(StudyTable {
        rows: chunks.into_iter().flatten().collect(),
    })
}

/// The standard simulation grid for one family:
/// `p ∈ {5, 10}`, `q ∈ {10, 100}`, `n ∈ {200, 1000, 5000}`, `ρ ∈ {0, 1, 2}`.
pub fn standard_grid(family: &'static dyn GlmFamily, seed: u64) -> Vec<SyntheticSpec> {
    let mut grid = Vec::new();
    for &rho in &[0.0, 1.0, 2.0] {
        for &n in &[200, 1000, 5000] {
            for &p in &[5, 10] {
                for &q in &[10, 100] {
                    let cell_seed = seed.wrapping_add(grid.len() as u64);
                    grid.push(SyntheticSpec::new(n, p, q, rho, family, cell_seed));
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub method: String,
    pub loss: f64,
    pub corr_with_protected: f64,
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &Vector, b: &Vector) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&u, &v) in a.iter().zip(b.iter()) {
        sab += (u - ma) * (v - mb);
        saa += (u - ma) * (u - ma);
        sbb += (v - mb) * (v - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Step size and iteration count of the trajectory demonstration.
pub const PATH_DEMO_STEP: f64 = 0.1;
pub const PATH_DEMO_ITERATIONS: usize = 300;

/// Logistic regression on `(z1, z2)` with `x1 = 2 z1 + e`, optimized three
/// ways from the intercept-only model with steps of size [`PATH_DEMO_STEP`]:
/// unconstrained on `Z`, unconstrained on `P⊥_{[1,x1]} Z`, and the
/// constrained fit. Records the mean loss and `corr(h(Dγ), x1)` per iteration.
pub fn path_demo(seed: u64) -> Result<Vec<TrajectoryRow>> {
    let spec = SyntheticSpec {
        true_gamma: Some(Vector::from_vec(vec![1.0, 1.0])),
        ..SyntheticSpec::new(1000, 1, 2, 2.0, &BERNOULLI, seed)
    };
    let data = generate(&spec)?;
    let x1 = data.x.column(0).into_owned();
    let mut rows = Vec::new();

    let zc = crate::correct::correct_features_linear(&linalg::with_intercept(&data.x), &data.z)?;
    for (method, z) in [("unconstrained", &data.z), ("linear", &zc)] {
        let design = linalg::with_intercept(z);
        let mut gamma = Vector::zeros(3);
        gamma[0] = BERNOULLI.link(BERNOULLI.clamp_mean(data.y.mean()));
        for t in 0..=PATH_DEMO_ITERATIONS {
            let eta = &design * &gamma;
            let mu = eta.map(|e| BERNOULLI.inverse_link(e));
            let loss = crate::glm::negative_log_likelihood(&BERNOULLI, &data.y, &eta) / 1000.0;
            rows.push(TrajectoryRow {
                iteration: t,
                method: method.to_string(),
                loss,
                corr_with_protected: pearson(&mu, &x1),
            });
            let grad = design.tr_mul(&(&mu - &data.y));
            let mut weighted = design.clone();
            for (i, mut row) in weighted.row_iter_mut().enumerate() {
                row *= BERNOULLI.inverse_link_deriv(eta[i]);
            }
            let hess = design.tr_mul(&weighted);
            let step = hess.lu().solve(&grad).ok_or(OrthoError::SingularInformation)?;
            gamma.axpy(-PATH_DEMO_STEP, &step, 1.0);
        }
    }

    let cfg = MdmmConfig {
        learning_rate: PATH_DEMO_STEP,
        warm_start: false,
        trace_every: 1,
        max_iter: PATH_DEMO_ITERATIONS,
        // run the full budget so all methods share the iteration axis
        loss_window: PATH_DEMO_ITERATIONS + 1,
        ..Default::default()
    };
    let trace = match fit_constrained_glm(&data.z, &data.y, &data.x, &BERNOULLI, &cfg) {
        Ok(out) => out.trajectory,
        Err(OrthoError::ConstrainedDidNotConverge(best)) => best.trajectory,
        Err(e) => return Err(e),
    };
    let design = linalg::with_intercept(&data.z);
    for step in trace {
        let mu = (&design * &step.gamma).map(|e| BERNOULLI.inverse_link(e));
        rows.push(TrajectoryRow {
            iteration: step.iteration,
            method: "glm-constrained".into(),
            loss: step.loss,
            corr_with_protected: pearson(&mu, &x1),
        });
    }
    Ok(rows)
}
