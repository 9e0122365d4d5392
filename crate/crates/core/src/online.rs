//! Orthogonalization during training: a small dense ReLU network whose hidden
//! pre-activation is projected onto the complement of the protected design in
//! every minibatch, trained on synthetic data where a dominant confounder
//! channel predicts the label in training but not at test time.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{OrthoError, Result};
use crate::evalmodel::evaluate_glm;
use crate::glm::{EvaluationReport, BERNOULLI};
use crate::linalg::{self, Matrix, Vector};

/// Probit of the target Bayes accuracy 0.85; the class means sit
/// `2 * BAYES_PROBIT` apart under unit noise.
const BAYES_PROBIT: f64 = 1.036_433_389_493_789_9;
/// Magnitude of the confounder channels relative to the unit-variance signal.
pub const CONFOUNDER_SCALE: f64 = 4.0;
pub const CONFOUNDER_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundedDataset {
    /// Signal columns followed by the confounder channels.
    pub features: Matrix,
    /// Binary confounder indicator, one column.
    pub protected: Matrix,
    pub labels: Vector,
    pub split: Vec<Split>,
}

impl ConfoundedDataset {
    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.split.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn rows(&self, idx: &[usize]) -> (Matrix, Matrix, Vector) {
        (
            self.features.select_rows(idx),
            self.protected.select_rows(idx),
            self.labels.select_rows(idx),
        )
    }
}

/// Draws the confounded dataset.
///
/// Labels are fair coins and the signal is `N(mu_y, I)` with class means
/// chosen so the Bayes classifier on the signal alone reaches 0.85. The
/// confounder `c` is 1 for every class-0 training or validation row and 0 for
/// class-1 ones; test rows draw `c` as an independent fair coin. The
/// confounder is appended as `CONFOUNDER_CHANNELS` columns equal to
/// `CONFOUNDER_SCALE * c` plus Gaussian jitter of standard deviation `noise`.
/// The validation split has `max(1, n_train / 5)` rows.
pub fn make_confounded_data(
    n_train: usize,
    n_test: usize,
    signal_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<ConfoundedDataset> {
    if n_train == 0 || n_test == 0 || signal_dim == 0 {
        return Err(OrthoError::InvalidSpec(
            "n_train, n_test and signal_dim must be at least 1".into(),
        ));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(OrthoError::InvalidSpec(format!("noise must be non-negative, got {noise}")));
    }
    let n_val = (n_train / 5).max(1);
    let n = n_train + n_val + n_test;
    let width = signal_dim + CONFOUNDER_CHANNELS;
    let shift = BAYES_PROBIT / (signal_dim as f64).sqrt();
    let jitter = Normal::new(0.0, noise).map_err(|e| OrthoError::InvalidSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut features = Matrix::zeros(n, width);
    let mut protected = Matrix::zeros(n, 1);
    let mut labels = Vector::zeros(n);
    let mut split = Vec::with_capacity(n);
    for i in 0..n {
        let part = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let y = rng.random_bool(0.5);
        let c = match part {
            Split::Test => rng.random_bool(0.5),
            _ => !y,
        };
        let mean = if y { shift } else { -shift };
        for j in 0..signal_dim {
            let e: f64 = StandardNormal.sample(&mut rng);
            features[(i, j)] = mean + e;
        }
        let level = if c { CONFOUNDER_SCALE } else { 0.0 };
        for j in signal_dim..width {
            features[(i, j)] = level + jitter.sample(&mut rng);
        }
        protected[(i, 0)] = f64::from(u8::from(c));
        labels[i] = f64::from(u8::from(y));
        split.push(part);
    }
    Ok(ConfoundedDataset {
        features,
        protected,
        labels,
        split,
    })
}

#[derive(Debug, Clone)]
pub struct MlpConfig {
    /// Input, hidden and output widths; the output width must be 1.
    pub layer_widths: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hidden layer (0-based) whose pre-activation is projected.
    pub ortho_layer_index: usize,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(input: usize) -> Self {
        MlpConfig {
            layer_widths: vec![input, 16, 8, 1],
            learning_rate: 0.05,
            batch_size: 128,
            epochs: 30,
            ortho_layer_index: 0,
            seed: 0,
        }
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_widths.len().saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.layer_widths;
        if w.len() < 3 || w.contains(&0) || w[w.len() - 1] != 1 {
            return Err(OrthoError::InvalidSpec(
                "layer_widths needs input, at least one hidden layer and a single output".into(),
            ));
        }
        if self.ortho_layer_index >= self.hidden_layers() {
            return Err(OrthoError::InvalidSpec(format!(
                "ortho_layer_index {} but only {} hidden layers",
                self.ortho_layer_index,
                self.hidden_layers()
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(OrthoError::InvalidSpec("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(OrthoError::InvalidSpec("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Dense network; `weights[l]` maps layer `l` to `l + 1` and is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

/// How the projected layer is corrected in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Correction<'a> {
    None,
    /// Project onto the complement of the given batch design.
    Batch(&'a Matrix),
}

struct Forward {
    /// Layer inputs `A_0 .. A_L-1` and pre-activations `Z_1 .. Z_L`.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    logits: Vector,
}

impl Mlp {
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let scale = (2.0 / pair[0] as f64).sqrt();
            weights.push(Matrix::from_fn(pair[0], pair[1], |_, _| {
                let e: f64 = StandardNormal.sample(rng);
                scale * e
            }));
            biases.push(Vector::zeros(pair[1]));
        }
        Mlp { weights, biases }
    }

    fn forward(&self, input: &Matrix, ortho: usize, corr: Correction) -> Result<Forward> {
        let depth = self.weights.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut a = input.clone();
        for l in 0..depth {
            let mut z = &a * &self.weights[l];
            for mut row in z.row_iter_mut() {
                row += self.biases[l].transpose();
            }
            if l == ortho {
                match corr {
                    Correction::None => {}
                    Correction::Batch(design) => {
                        z = linalg::build_projector(design)?.apply_complement(&z)?;
                    }
                }
            }
            inputs.push(a);
            a = z.map(|v| v.max(0.0));
            pre.push(z);
        }
        let logits = pre[depth - 1].column(0).into_owned();
        Ok(Forward { inputs, pre, logits })
    }

    /// Output probabilities.
    pub fn predict(&self, input: &Matrix, ortho: usize, corr: Correction) -> Result<Vector> {
        Ok(self.forward(input, ortho, corr)?.logits.map(sigmoid))
    }

    /// The (possibly corrected) pre-activation of hidden layer `layer`.
    pub fn hidden_preactivation(
        &self,
        input: &Matrix,
        layer: usize,
        ortho: usize,
        corr: Correction,
    ) -> Result<Matrix> {
        Ok(self.forward(input, ortho, corr)?.pre.swap_remove(layer))
    }

    /// Mean binary cross-entropy and its gradient with respect to every
    /// weight and bias. Under `Correction::Batch` the projector is a constant
    /// of the batch, so the gradient entering the projected layer is
    /// `P⊥ * upstream`.
    pub fn loss_and_gradient(
        &self,
        input: &Matrix,
        labels: &Vector,
        ortho: usize,
        corr: Correction,
    ) -> Result<(f64, Mlp)> {
        let projector = match corr {
            Correction::Batch(design) => Some(linalg::build_projector(design)?),
            _ => None,
        };
        let fwd = self.forward(input, ortho, corr)?;
        let b = input.nrows() as f64;
        let loss = fwd
            .logits
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / b;

        let depth = self.weights.len();
        let mut grad = Mlp {
            weights: self.weights.iter().map(|w| Matrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: self.biases.iter().map(|v| Vector::zeros(v.len())).collect(),
        };
        let mut delta = Matrix::from_fn(input.nrows(), 1, |i, _| (sigmoid(fwd.logits[i]) - labels[i]) / b);
        for l in (0..depth).rev() {
            if l == ortho {
                if let Some(p) = &projector {
                    delta = p.apply_complement(&delta)?;
                }
            }
            grad.weights[l] = fwd.inputs[l].tr_mul(&delta);
            grad.biases[l] = delta.row_sum().transpose();
            if l > 0 {
                let mut up = &delta * self.weights[l].transpose();
                up.zip_apply(&fwd.pre[l - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = up;
            }
        }
        Ok((loss, grad))
    }

    fn sgd_step(&mut self, grad: &Mlp, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= g * lr;
        }
        for (v, g) in self.biases.iter_mut().zip(&grad.biases) {
            v.axpy(-lr, g, 1.0);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Protected design used by the projection: the confounder indicator alone.
///
/// Adding an intercept would also remove each confounder group's mean, and
/// with the training label a function of the confounder that erases all of
/// the class signal from the layer.
pub fn protected_design(protected: &Matrix) -> Matrix {
    protected.clone()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub loss: f64,
    /// `‖Xᵀ H‖_F` of the projected layer: the largest per-batch value of the
    /// epoch for the train split, the whole split as evaluated otherwise.
    pub constraint_residual: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedMlp {
    pub net: Mlp,
    pub ortho_layer_index: usize,
    pub corrected: bool,
}

impl TrainedMlp {
    /// Predictions for a set of rows. A corrected network projects the layer
    /// against the protected design of exactly these rows.
    pub fn predict(&self, features: &Matrix, protected: &Matrix) -> Result<Vector> {
        let design = protected_design(protected);
        self.net.predict(features, self.ortho_layer_index, self.correction(&design))
    }

    /// The projected layer's pre-activation as used for prediction.
    pub fn layer(&self, features: &Matrix, protected: &Matrix) -> Result<Matrix> {
        let design = protected_design(protected);
        let ortho = self.ortho_layer_index;
        self.net.hidden_preactivation(features, ortho, ortho, self.correction(&design))
    }

    fn correction<'a>(&self, design: &'a Matrix) -> Correction<'a> {
        if !self.corrected {
            return Correction::None;
        }
        if linalg::check_full_rank(design).is_err() {
            warn!("protected design of the evaluated rows is rank deficient, predicting uncorrected");
            return Correction::None;
        }
        Correction::Batch(design)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub model: TrainedMlp,
    pub metrics: Vec<EpochMetrics>,
    /// `‖X_bᵀ H^c‖_F` for every corrected batch, in training order.
    pub batch_residuals: Vec<f64>,
    pub skipped_batches: usize,
    /// Evaluation model of the confounder on the final test predictions.
    pub confounder_evaluation: EvaluationReport,
}

/// Trains with minibatch SGD; deterministic given `cfg.seed`.
///
/// With `with_correction` every batch whose protected design has full column
/// rank replaces the pre-activation `H` of layer `ortho_layer_index` by
/// `P⊥_{X_b} H`; rank-deficient batches train uncorrected and are counted.
/// Evaluation projects each split as a whole (the full training set for the
/// train split). The projected layer's bias stays at zero in both variants:
/// without an intercept in `X` its projection is `(1 - c) bᵀ`, an exact copy
/// of the confounder.
pub fn train_mlp(data: &ConfoundedDataset, cfg: &MlpConfig, with_correction: bool) -> Result<TrainingResult> {
    cfg.validate()?;
    if cfg.layer_widths[0] != data.features.ncols() {
        return Err(OrthoError::dims("input width", data.features.ncols(), cfg.layer_widths[0]));
    }
    let train = data.indices(Split::Train);
    if cfg.batch_size > train.len() {
        return Err(OrthoError::InvalidSpec(format!(
            "batch_size {} exceeds {} training rows",
            cfg.batch_size,
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::init(&cfg.layer_widths, &mut rng);
    let ortho = cfg.ortho_layer_index;
    let mut order = train.clone();
    let mut metrics = Vec::new();
    let mut batch_residuals = Vec::new();
    let mut skipped = 0;
    let mut model = TrainedMlp {
        net: net.clone(),
        ortho_layer_index: ortho,
        corrected: with_correction,
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut worst = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (xb, cb, yb) = data.rows(chunk);
            let design = protected_design(&cb);
            let corr = if with_correction {
                if linalg::check_full_rank(&design).is_ok() && chunk.len() > design.ncols() {
                    Correction::Batch(&design)
                } else {
                    warn!("epoch {epoch}: batch protected design is rank deficient, skipping correction");
                    skipped += 1;
                    Correction::None
                }
            } else {
                Correction::None
            };
            let (loss, grad) = net.loss_and_gradient(&xb, &yb, ortho, corr)?;
            if !loss.is_finite() {
                return Err(OrthoError::NonFinite("training loss (lower the learning rate)"));
            }
            let h = net.hidden_preactivation(&xb, ortho, ortho, corr)?;
            let residual = design.tr_mul(&h).norm();
            if matches!(corr, Correction::Batch(_)) {
                batch_residuals.push(residual);
            }
            worst = worst.max(residual);
            let mut grad = grad;
            grad.biases[ortho].fill(0.0);
            net.sgd_step(&grad, cfg.learning_rate);
        }

        model = TrainedMlp {
            net: net.clone(),
            ortho_layer_index: ortho,
            corrected: with_correction,
        };
        for split in [Split::Train, Split::Val, Split::Test] {
            let idx = data.indices(split);
            let (x, c, y) = data.rows(&idx);
            let (accuracy, loss) = score(&model, &x, &c, &y)?;
            let constraint_residual = if split == Split::Train {
                worst
            } else {
                protected_design(&c).tr_mul(&model.layer(&x, &c)?).norm()
            };
            metrics.push(EpochMetrics {
                epoch,
                split,
                accuracy,
                loss,
                constraint_residual,
            });
        }
    }

    let test = data.indices(Split::Test);
    let (x, c, _) = data.rows(&test);
    let predictions = model.predict(&x, &c)?;
    let mut confounder_evaluation = evaluate_glm(&c, &predictions, &BERNOULLI)?;
    confounder_evaluation.rename_slopes(&["confounder"]);
    Ok(TrainingResult {
        model,
        metrics,
        batch_residuals,
        skipped_batches: skipped,
        confounder_evaluation,
    })
}

fn score(model: &TrainedMlp, x: &Matrix, c: &Matrix, y: &Vector) -> Result<(f64, f64)> {
    let p = model.predict(x, c)?;
    let n = y.len() as f64;
    let correct = p.iter().zip(y.iter()).filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5)).count();
    let loss = p
        .iter()
        .zip(y.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    Ok((correct as f64 / n, loss))
}

/// The seeded desk-scale instance: 2000 training and 2000 test rows, ten
/// signal columns, confounder jitter 0.1, default network.
pub fn demo_instance(seed: u64) -> Result<(ConfoundedDataset, MlpConfig)> {
    let data = make_confounded_data(2000, 2000, 10, 0.1, seed)?;
    let cfg = MlpConfig {
        seed,
        ..MlpConfig::new(data.features.ncols())
    };
    Ok((data, cfg))
}

/// Accuracy of the final model on one split.
pub fn accuracy(result: &TrainingResult, data: &ConfoundedDataset, which: Split) -> Result<f64> {
    let idx = data.indices(which);
    let (x, c, y) = data.rows(&idx);
    Ok(score(&result.model, &x, &c, &y)?.0)
}

/// Pearson correlation between the confounder and the label on one split.
pub fn confounder_label_correlation(data: &ConfoundedDataset, which: Split) -> f64 {
    let idx = data.indices(which);
    let (_, c, y) = data.rows(&idx);
    crate::synth::pearson(&c.column(0).into_owned(), &y)
}
