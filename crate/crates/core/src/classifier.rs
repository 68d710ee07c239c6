//! Binary logistic regression over sparse rows.
//!
//! The training objective is
//!
//! ```text
//! f(w, b) = ||w||^2 / (2C) + sum_i cw_i * log(1 + exp(-y_i (w . x_i + b)))
//! ```
//!
//! with `y_i` in `{-1, +1}`, `cw_i` the positive-class weight for positives
//! and 1 otherwise. The bias is not regularized. The objective is minimized
//! with L-BFGS (history 10) and a backtracking Armijo line search until the
//! max-norm of the gradient drops to the configured tolerance.
//!
//! Everything runs sequentially in a fixed order, so identical inputs give
//! bit-identical models.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SparseMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("degenerate training set: need at least one positive and one negative label")]
    DegenerateTrainingSet,
    #[error("dimension mismatch: model has {model} features, matrix has {matrix}")]
    DimensionMismatch { model: usize, matrix: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelCountMismatch { rows: usize, labels: usize },
    #[error("row index {row} out of range for {n_rows} rows")]
    RowOutOfRange { row: usize, n_rows: usize },
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegConfig {
    /// Inverse regularization strength `C`.
    pub c: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub positive_class_weight: f64,
    pub history: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self { c: 1.0, max_iterations: 1000, gradient_tolerance: 1e-6, positive_class_weight: 1.0, history: 10 }
    }
}

impl LogRegConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(ClassifierError::InvalidConfig(format!("C must be positive, got {}", self.c)));
        }
        if !(self.positive_class_weight > 0.0) {
            return Err(ClassifierError::InvalidConfig("positive_class_weight must be positive".into()));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(ClassifierError::InvalidConfig("gradient_tolerance must be non-negative".into()));
        }
        if self.history == 0 {
            return Err(ClassifierError::InvalidConfig("history must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub gradient_max_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: LogRegConfig,
    pub diagnostics: FitDiagnostics,
}

impl LogRegModel {
    /// An untrained model with all-zero parameters.
    pub fn zeros(n_features: usize, config: LogRegConfig) -> Self {
        Self { weights: vec![0.0; n_features], bias: 0.0, config, diagnostics: FitDiagnostics::default() }
    }

    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn decision(&self, matrix: &SparseMatrix, row: usize) -> f64 {
        matrix.row(row).dot(&self.weights) + self.bias
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Training rows, labels and weights, checked once up front.
struct Problem<'a> {
    matrix: &'a SparseMatrix,
    rows: &'a [usize],
    labels: &'a [bool],
    config: LogRegConfig,
}

impl<'a> Problem<'a> {
    fn new(
        matrix: &'a SparseMatrix,
        rows: &'a [usize],
        labels: &'a [bool],
        config: &LogRegConfig,
    ) -> Result<Self, ClassifierError> {
        config.validate()?;
        if rows.len() != labels.len() {
            return Err(ClassifierError::LabelCountMismatch { rows: rows.len(), labels: labels.len() });
        }
        if let Some(&row) = rows.iter().find(|&&r| r >= matrix.n_rows()) {
            return Err(ClassifierError::RowOutOfRange { row, n_rows: matrix.n_rows() });
        }
        Ok(Self { matrix, rows, labels, config: *config })
    }

    fn dim(&self) -> usize {
        self.matrix.n_cols() + 1
    }

    /// Objective value and gradient at `theta = [w..., b]`.
    fn evaluate(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.matrix.n_cols();
        let (w, b) = (&theta[..n], theta[n]);
        let inv_c = 1.0 / self.config.c;
        let mut f = 0.5 * inv_c * w.iter().map(|v| v * v).sum::<f64>();
        for (g, &wj) in grad[..n].iter_mut().zip(w) {
            *g = inv_c * wj;
        }
        grad[n] = 0.0;
        for (&row, &label) in self.rows.iter().zip(self.labels) {
            let x = self.matrix.row(row);
            let z = x.dot(w) + b;
            let (y, cw) = if label { (1.0, self.config.positive_class_weight) } else { (-1.0, 1.0) };
            let margin = y * z;
            f += cw * softplus(-margin);
            let coef = -cw * y * sigmoid(-margin);
            for (j, v) in x.iter() {
                grad[j] += coef * v;
            }
            grad[n] += coef;
        }
        f
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let mut scratch = vec![0.0; theta.len()];
        self.evaluate(theta, &mut scratch)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Correction {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g`.
fn search_direction(history: &VecDeque<Correction>, grad: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for c in history.iter().rev() {
        let a = c.rho * dot(&c.s, &q);
        for (qi, yi) in q.iter_mut().zip(&c.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (c, a) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = c.rho * dot(&c.y, &q);
        for (qi, si) in q.iter_mut().zip(&c.s) {
            *qi += (a - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn minimize(problem: &Problem<'_>, mut theta: Vec<f64>) -> (Vec<f64>, FitDiagnostics) {
    const ARMIJO: f64 = 1e-4;
    const MAX_BACKTRACKS: usize = 60;

    let cfg = problem.config;
    let dim = problem.dim();
    let mut grad = vec![0.0; dim];
    let mut f = problem.evaluate(&theta, &mut grad);
    let mut history: VecDeque<Correction> = VecDeque::with_capacity(cfg.history);
    let mut trial = vec![0.0; dim];
    let mut trial_grad = vec![0.0; dim];
    let mut iterations = 0;

    while max_norm(&grad) > cfg.gradient_tolerance && iterations < cfg.max_iterations {
        iterations += 1;
        let mut direction = search_direction(&history, &grad);
        let mut slope = dot(&grad, &direction);
        if !(slope < 0.0) {
            history.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
        }
        let mut step = if history.is_empty() { (1.0 / dot(&grad, &grad).sqrt()).min(1.0) } else { 1.0 };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for ((t, x), d) in trial.iter_mut().zip(&theta).zip(&direction) {
                *t = x + step * d;
            }
            let f_trial = problem.evaluate(&trial, &mut trial_grad);
            let sufficient = f_trial <= f + ARMIJO * step * slope;
            // Near the optimum the decrease can fall below rounding noise in f.
            let flat = (f_trial - f).abs() <= 1e-13 * f.abs().max(1.0) && max_norm(&trial_grad) < max_norm(&grad);
            if f_trial.is_finite() && (sufficient || flat) {
                accepted = Some(f_trial);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if history.len() == cfg.history {
                history.pop_front();
            }
            history.push_back(Correction { s, y, rho: 1.0 / sy });
        }
        std::mem::swap(&mut theta, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        f = f_new;
    }

    let gradient_max_norm = max_norm(&grad);
    let diagnostics = FitDiagnostics {
        iterations,
        converged: gradient_max_norm <= cfg.gradient_tolerance,
        objective: f,
        gradient_max_norm,
    };
    (theta, diagnostics)
}

/// Fits a model on `rows` of `matrix`. `rows` should be sorted so that the
/// summation order, and thus the result, does not depend on review order.
pub fn train(
    matrix: &SparseMatrix,
    rows: &[usize],
    labels: &[bool],
    config: &LogRegConfig,
) -> Result<LogRegModel, ClassifierError> {
    train_from(matrix, rows, labels, config, None)
}

/// Like [`train`], optionally starting from `init` instead of zeros.
pub fn train_from(
    matrix: &SparseMatrix,
    rows: &[usize],
    labels: &[bool],
    config: &LogRegConfig,
    init: Option<&LogRegModel>,
) -> Result<LogRegModel, ClassifierError> {
    let problem = Problem::new(matrix, rows, labels, config)?;
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(ClassifierError::DegenerateTrainingSet);
    }
    let mut theta = vec![0.0; problem.dim()];
    if let Some(model) = init {
        if model.n_features() != matrix.n_cols() {
            return Err(ClassifierError::DimensionMismatch { model: model.n_features(), matrix: matrix.n_cols() });
        }
        theta[..matrix.n_cols()].copy_from_slice(&model.weights);
        theta[matrix.n_cols()] = model.bias;
    }
    let (mut theta, diagnostics) = minimize(&problem, theta);
    let bias = theta.pop().unwrap_or(0.0);
    Ok(LogRegModel { weights: theta, bias, config: *config, diagnostics })
}

/// `sigmoid(w . x + b)` for each requested row, in the given order.
pub fn predict_proba(model: &LogRegModel, matrix: &SparseMatrix, rows: &[usize]) -> Result<Vec<f64>, ClassifierError> {
    if model.n_features() != matrix.n_cols() {
        return Err(ClassifierError::DimensionMismatch { model: model.n_features(), matrix: matrix.n_cols() });
    }
    if let Some(&row) = rows.iter().find(|&&r| r >= matrix.n_rows()) {
        return Err(ClassifierError::RowOutOfRange { row, n_rows: matrix.n_rows() });
    }
    Ok(rows.iter().map(|&r| sigmoid(model.decision(matrix, r))).collect())
}

/// Training objective at the model's parameters.
pub fn objective(
    model: &LogRegModel,
    matrix: &SparseMatrix,
    rows: &[usize],
    labels: &[bool],
    config: &LogRegConfig,
) -> Result<f64, ClassifierError> {
    let problem = Problem::new(matrix, rows, labels, config)?;
    Ok(problem.objective(&pack(model, matrix)?))
}

/// Analytic gradient of the training objective, laid out as
/// `[d/dw_0, ..., d/dw_{m-1}, d/db]`.
pub fn gradient(
    model: &LogRegModel,
    matrix: &SparseMatrix,
    rows: &[usize],
    labels: &[bool],
    config: &LogRegConfig,
) -> Result<Vec<f64>, ClassifierError> {
    let problem = Problem::new(matrix, rows, labels, config)?;
    let theta = pack(model, matrix)?;
    let mut grad = vec![0.0; theta.len()];
    problem.evaluate(&theta, &mut grad);
    Ok(grad)
}

fn pack(model: &LogRegModel, matrix: &SparseMatrix) -> Result<Vec<f64>, ClassifierError> {
    if model.n_features() != matrix.n_cols() {
        return Err(ClassifierError::DimensionMismatch { model: model.n_features(), matrix: matrix.n_cols() });
    }
    let mut theta = model.weights.clone();
    theta.push(model.bias);
    Ok(theta)
}
