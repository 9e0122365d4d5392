use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use serde_json::json;

use orthokit::correct::{
    correct_tensor_prediction, corrector_by_name, preconditioner_by_name, CorrectionOutcome, CorrectionProblem,
    MdmmConfig,
};
use orthokit::evalmodel::{evaluate_tensor, evaluator_by_name, Evaluation};
use orthokit::glm::{family_by_name, GlmFamily, BERNOULLI, POISSON};
use orthokit::online::{self, Split};
use orthokit::synth::{self, SyntheticSpec};
use orthokit::OrthoError;

use crate::io::{encode_protected, fmt_f64, read_tensor, write_csv, write_json, write_tensor, Table};
use crate::{CorrectArgs, DemoArgs, EvaluateArgs, MdmmArgs, SimulateArgs};

const ALPHA: f64 = 0.05;

fn mdmm_config(args: &MdmmArgs) -> Result<MdmmConfig> {
    let mut cfg = match args.preconditioner.as_deref() {
        Some("gradient") => MdmmConfig::plain_gradient(),
        Some(name) => MdmmConfig {
            preconditioner: preconditioner_by_name(name)?,
            ..MdmmConfig::default()
        },
        None => MdmmConfig::default(),
    };
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.zeta {
        cfg.damping = v;
    }
    if let Some(v) = args.max_iter {
        cfg.max_iter = v;
    }
    if let Some(v) = args.tol {
        cfg.constraint_tol = v;
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn correct(args: &CorrectArgs) -> Result<u8> {
    let table = Table::read(&args.data)?;
    let protected = encode_protected(&table, &args.protected)?;
    if args.method == "tensor" {
        return correct_tensor(args, &protected);
    }
    let outcome_col = args
        .outcome
        .as_deref()
        .ok_or_else(|| anyhow!("--outcome is required for method '{}'", args.method))?;
    let y = table.numeric(outcome_col)?;
    let features: Vec<String> = match &args.features {
        Some(f) => f.clone(),
        None => table
            .headers
            .iter()
            .filter(|h| *h != outcome_col && !args.protected.contains(h))
            .cloned()
            .collect(),
    };
    if features.is_empty() {
        bail!("no feature columns left in {} after removing outcome and protected columns", table.source);
    }
    let z = table.numeric_matrix(&features)?;
    let family = family_by_name(&args.family)?;
    let corrector = corrector_by_name(&args.method)?;
    let problem = CorrectionProblem {
        z: &z,
        y: &y,
        x: &protected.x,
        family,
        mdmm: mdmm_config(&args.mdmm)?,
    };
    let (result, code) = match corrector.correct(&problem) {
        Ok(out) => (out, 0),
        Err(OrthoError::ConstrainedDidNotConverge(best)) => (*best, 3),
        Err(e) => return Err(e.into()),
    };

    create_out(&args.out)?;
    write_csv(
        &args.out.join("corrected_predictions.csv"),
        &["row_id", "y_hat_corrected"],
        result
            .corrected_predictions
            .iter()
            .enumerate()
            .map(|(i, &v)| vec![i.to_string(), fmt_f64(v)]),
    )?;
    let names = std::iter::once("(intercept)".to_string()).chain(features.iter().cloned());
    write_csv(
        &args.out.join("coefficients.csv"),
        &["name", "gamma_c"],
        names.zip(result.gamma_c.iter()).map(|(n, &g)| vec![n, fmt_f64(g)]),
    )?;
    write_json(&args.out.join("report.json"), &correct_report(args, &result, &features, &protected))?;
    if code == 3 {
        eprintln!(
            "warning: {} did not converge after {} iterations (constraint residual {:.3e}); best iterate written",
            args.method, result.iterations, result.constraint_residual
        );
    }
    Ok(code)
}

fn correct_report(
    args: &CorrectArgs,
    r: &CorrectionOutcome,
    features: &[String],
    protected: &crate::io::ProtectedDesign,
) -> serde_json::Value {
    json!({
        "method": args.method,
        "family": args.family,
        "n": r.corrected_predictions.len(),
        "features": features,
        "protected": protected.names,
        "categorical": protected.categorical,
        "constraint_residual": r.constraint_residual,
        "iterations": r.iterations,
        "converged": r.converged,
        "loss": r.loss,
        "lambda_final": r.lambda_final,
    })
}

fn correct_tensor(args: &CorrectArgs, protected: &crate::io::ProtectedDesign) -> Result<u8> {
    let path = args.tensor.as_ref().ok_or_else(|| anyhow!("--tensor is required for method 'tensor'"))?;
    let t = read_tensor(path)?;
    if t.n() != protected.x.nrows() {
        bail!(
            "tensor {} has {} rows but {} has {}",
            path.display(),
            t.n(),
            args.data.display(),
            protected.x.nrows()
        );
    }
    let corrected = correct_tensor_prediction(&protected.x, &t)?;
    let residual = protected.x.tr_mul(&corrected.matricize()).norm_squared();
    let check = evaluate_tensor(&protected.x, &corrected)?;
    create_out(&args.out)?;
    write_tensor(&args.out.join("corrected_tensor.csv"), &corrected)?;
    write_json(
        &args.out.join("report.json"),
        &json!({
            "method": "tensor",
            "dims": t.dims(),
            "protected": protected.names,
            "categorical": protected.categorical,
            "constraint_residual": residual,
            "evaluation_frobenius": check.frobenius,
            "iterations": 0,
            "converged": true,
            "loss": null,
        }),
    )?;
    Ok(0)
}

fn p_text(p: f64) -> String {
    if p < 2e-16 {
        "<2e-16".into()
    } else if p < 1e-3 {
        format!("{p:.1e}")
    } else {
        format!("{p:.3}")
    }
}

fn mark(pass: bool) -> &'static str {
    if pass {
        "✓"
    } else {
        "✗"
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<u8> {
    let preds = Table::read(&args.predictions)?;
    let column = match &args.column {
        Some(c) => c.clone(),
        None if preds.headers.iter().any(|h| h == "y_hat_corrected") => "y_hat_corrected".into(),
        None => preds.headers.last().cloned().unwrap_or_default(),
    };
    let y_hat = preds.numeric(&column)?;
    let pdata = Table::read(&args.protected_data)?;
    let columns: Vec<String> = match &args.protected {
        Some(c) => c.clone(),
        None => pdata.headers.iter().filter(|h| *h != "row_id").cloned().collect(),
    };
    let design = encode_protected(&pdata, &columns)?;
    if design.x.nrows() != y_hat.len() {
        bail!(
            "{} has {} rows but {} has {}",
            preds.source,
            y_hat.len(),
            pdata.source,
            design.x.nrows()
        );
    }
    let family = family_by_name(&args.family)?;
    let evaluator = evaluator_by_name(if args.relu { "relu-l2" } else { "glm" })?;
    let evaluation = evaluator.evaluate(&design.x, &y_hat, family)?;

    create_out(&args.out)?;
    let path = args.out.join("evaluation.csv");
    let headers = ["coefficient", "estimate", "std_error", "z", "p_value"];
    match &evaluation {
        Evaluation::Glm(report) => {
            let mut rows = Vec::new();
            if let Some(b0) = &report.intercept {
                rows.push(vec!["(intercept)".into(), fmt_f64(b0.estimate), fmt_f64(b0.std_error), fmt_f64(b0.z), fmt_f64(b0.p_value)]);
            }
            for (row, name) in report.slopes.iter().zip(&design.names) {
                rows.push(vec![name.clone(), fmt_f64(row.estimate), fmt_f64(row.std_error), fmt_f64(row.z), fmt_f64(row.p_value)]);
                println!(
                    "{name:<24} {:>10.3} ({}) {}",
                    row.estimate,
                    p_text(row.p_value),
                    mark(!row.significant(ALPHA))
                );
            }
            write_csv(&path, &headers, rows)?;
        }
        Evaluation::ReluL2(r) => {
            let rows = design
                .names
                .iter()
                .zip(&r.beta)
                .map(|(n, &b)| vec![n.clone(), fmt_f64(b), fmt_f64(f64::NAN), fmt_f64(f64::NAN), fmt_f64(f64::NAN)]);
            write_csv(&path, &headers, rows)?;
            println!(
                "relu-l2: objective {:.6e} (at zero {:.6e}), relu norm {:.3e} {}",
                r.objective,
                r.objective_at_zero,
                r.relu_norm,
                mark(r.certified)
            );
        }
    }
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridCell {
    n: usize,
    p: usize,
    q: usize,
    rho: f64,
    family: String,
    seed: Option<u64>,
}

fn load_grid(spec: &str, seed: u64) -> Result<Vec<SyntheticSpec>> {
    match spec {
        "standard-bernoulli" => return Ok(synth::standard_grid(&BERNOULLI, seed)),
        "standard-poisson" => return Ok(synth::standard_grid(&POISSON, seed)),
        _ => {}
    }
    let text = fs::read_to_string(spec)
        .with_context(|| format!("--grid '{spec}' is neither a preset nor a readable file"))?;
    let cells: Vec<GridCell> = serde_json::from_str(&text).with_context(|| format!("invalid grid file {spec}"))?;
    if cells.is_empty() {
        bail!("grid file {spec} lists no settings");
    }
    cells
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let family: &'static dyn GlmFamily = family_by_name(&c.family)?;
            let s = SyntheticSpec::new(c.n, c.p, c.q, c.rho, family, c.seed.unwrap_or(seed.wrapping_add(i as u64)));
            s.validate().with_context(|| format!("grid setting {i}"))?;
            Ok(s)
        })
        .collect()
}

pub fn simulate(args: &SimulateArgs) -> Result<u8> {
    if args.replicates == 0 {
        bail!("--replicates must be at least 1");
    }
    let grid = load_grid(&args.grid, args.seed)?;
    let table = synth::simulation_study(&grid, args.replicates, &mdmm_config(&args.mdmm)?)?;
    create_out(&args.out)?;
    write_csv(
        &args.out.join("study.csv"),
        &["setting", "replicate", "method", "coefficient_index", "estimate", "p_value", "constraint_residual", "error"],
        table.rows.iter().map(|r| {
            vec![
                r.setting.clone(),
                r.replicate.to_string(),
                r.method.clone(),
                r.coefficient_index.to_string(),
                fmt_f64(r.estimate),
                fmt_f64(r.p_value),
                fmt_f64(r.constraint_residual),
                r.error.clone(),
            ]
        }),
    )?;
    let summary = table.summarize(ALPHA);
    write_csv(
        &args.out.join("summary.csv"),
        &["setting", "method", "median_abs_estimate", "median_p_value", "fraction_significant", "fraction_feasible", "failures"],
        summary.iter().map(|s| {
            vec![
                s.setting.clone(),
                s.method.clone(),
                fmt_f64(s.median_abs_estimate),
                fmt_f64(s.median_p_value),
                fmt_f64(s.fraction_significant),
                fmt_f64(s.fraction_feasible),
                s.failures.to_string(),
            ]
        }),
    )?;
    let failures: usize = summary.iter().map(|s| s.failures).sum();
    println!(
        "{} settings x {} replicates: {} rows, {} failed fits",
        grid.len(),
        args.replicates,
        table.rows.len(),
        failures
    );
    Ok(0)
}

pub fn demo(args: &DemoArgs) -> Result<u8> {
    match args.which.as_str() {
        "paths" => {
            let rows = synth::path_demo(args.seed)?;
            create_out(&args.out)?;
            write_csv(
                &args.out.join("trajectory.csv"),
                &["iteration", "method", "loss", "corr_with_protected"],
                rows.iter().map(|r| {
                    vec![r.iteration.to_string(), r.method.clone(), fmt_f64(r.loss), fmt_f64(r.corr_with_protected)]
                }),
            )?;
            for method in ["unconstrained", "linear", "glm-constrained"] {
                if let Some(last) = rows.iter().rev().find(|r| r.method == method) {
                    println!("{method:<16} final loss {:.5} corr {:+.3e}", last.loss, last.corr_with_protected);
                }
            }
            Ok(0)
        }
        "online" => demo_online(args),
        other => bail!("unknown demo '{other}' (available: paths, online)"),
    }
}

fn demo_online(args: &DemoArgs) -> Result<u8> {
    let (data, mut cfg) = online::demo_instance(args.seed)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let plain = online::train_mlp(&data, &cfg, false)?;
    let corrected = online::train_mlp(&data, &cfg, true)?;
    create_out(&args.out)?;
    let rows = [("uncorrected", &plain), ("corrected", &corrected)]
        .into_iter()
        .flat_map(|(variant, res)| {
            res.metrics.iter().map(move |m| {
                vec![
                    variant.to_string(),
                    m.epoch.to_string(),
                    m.split.name().to_string(),
                    fmt_f64(m.accuracy),
                    fmt_f64(m.constraint_residual),
                    fmt_f64(m.loss),
                ]
            })
        })
        .collect::<Vec<_>>();
    write_csv(
        &args.out.join("metrics.csv"),
        &["variant", "epoch", "split", "accuracy", "constraint_residual", "loss"],
        rows,
    )?;
    let acc_plain = online::accuracy(&plain, &data, Split::Test)?;
    let acc_corr = online::accuracy(&corrected, &data, Split::Test)?;
    println!(
        "test accuracy: uncorrected {acc_plain:.3}, corrected {acc_corr:.3} ({:+.1} points); confounder p-value: uncorrected {}, corrected {}",
        100.0 * (acc_corr - acc_plain),
        p_text(plain.confounder_evaluation.min_p_value()),
        p_text(corrected.confounder_evaluation.min_p_value()),
    );
    Ok(0)
}
