//! Parameter vectors and the two desk-scale model families.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::data::{DataKind, Dataset};
use crate::error::{Result, SimError};

/// Flat model parameters; the unit that clients exchange.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(SimError::Dimension {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        Self(self.0.iter().map(|a| a * factor).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// Euclidean norm.
    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// `||self - other||`; panics on dimension mismatch (internal hot path).
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.squared_distance(other).sqrt()
    }

    pub fn squared_distance(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dimension mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "dimension mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    /// Arithmetic mean of a non-empty set of equal-length vectors, computed
    /// as `first + sum(v - first) / n` so a set of identical vectors yields
    /// that vector bit for bit.
    pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a ParamVector>) -> Result<ParamVector> {
        let mut iter = vectors.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| SimError::param("mean of an empty set"))?;
        let mut offset = vec![0.0; first.len()];
        let mut count = 1usize;
        for v in iter {
            first.check_dim(v)?;
            for ((o, a), b) in offset.iter_mut().zip(&v.0).zip(&first.0) {
                *o += a - b;
            }
            count += 1;
        }
        let n = count as f64;
        Ok(Self(first.0.iter().zip(&offset).map(|(b, o)| b + o / n).collect()))
    }

    /// Comma-separated values on one line (checkpoint format).
    pub fn to_csv_line(&self) -> String {
        self.0
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_csv_line(line: &str) -> Result<ParamVector> {
        let line = line.trim();
        if line.is_empty() {
            return Ok(ParamVector::default());
        }
        line.split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(ParamVector)
            .map_err(|e| SimError::Parse(e.to_string()))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl fmt::Display for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.to_csv_line())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    LinearRegression,
    /// Softmax classifier with one bias per class.
    MultinomialLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        Self {
            family: ModelFamily::LinearRegression,
            input_dim,
            classes: 0,
        }
    }

    pub fn logistic(input_dim: usize, classes: usize) -> Self {
        Self {
            family: ModelFamily::MultinomialLogistic,
            input_dim,
            classes,
        }
    }

    /// Model matching a dataset's kind and width.
    pub fn for_dataset(data: &Dataset) -> Self {
        match data.kind() {
            DataKind::Regression => Self::linear(data.dim()),
            DataKind::Classification { classes } => Self::logistic(data.dim(), classes),
        }
    }

    /// Layout for logistic: `classes x input_dim` weights row-major, then
    /// `classes` biases.
    pub fn param_dim(&self) -> usize {
        match self.family {
            ModelFamily::LinearRegression => self.input_dim,
            ModelFamily::MultinomialLogistic => self.input_dim * self.classes + self.classes,
        }
    }

    fn check(&self, w: &ParamVector, data: &Dataset, batch: &[usize]) -> Result<()> {
        if w.len() != self.param_dim() {
            return Err(SimError::Dimension {
                expected: self.param_dim(),
                got: w.len(),
            });
        }
        if data.dim() != self.input_dim {
            return Err(SimError::Dimension {
                expected: self.input_dim,
                got: data.dim(),
            });
        }
        match (self.family, data.kind()) {
            (ModelFamily::LinearRegression, DataKind::Regression) => {}
            (ModelFamily::MultinomialLogistic, DataKind::Classification { classes }) if classes == self.classes => {}
            _ => return Err(SimError::Kind("model family does not match dataset kind".into())),
        }
        if batch.is_empty() {
            return Err(SimError::param("empty batch"));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
            return Err(SimError::param(format!("batch index {bad} out of range")));
        }
        Ok(())
    }

    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.input_dim;
        let bias = &w[d * self.classes..];
        for (h, o) in out.iter_mut().enumerate() {
            let row = &w[h * d..(h + 1) * d];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[h];
        }
    }

    /// Mean loss over `batch` (rows of `data`): squared error for regression,
    /// softmax cross-entropy for classification.
    pub fn loss(&self, w: &ParamVector, data: &Dataset, batch: &[usize]) -> Result<f64> {
        self.check(w, data, batch)?;
        let w = w.as_slice();
        let total: f64 = match self.family {
            ModelFamily::LinearRegression => batch
                .iter()
                .map(|&i| {
                    let r = dot(w, data.row(i)) - data.target(i);
                    r * r
                })
                .sum(),
            ModelFamily::MultinomialLogistic => {
                let mut z = vec![0.0; self.classes];
                batch
                    .iter()
                    .map(|&i| {
                        self.logits(w, data.row(i), &mut z);
                        log_sum_exp(&z) - z[data.label(i)]
                    })
                    .sum()
            }
        };
        Ok(total / batch.len() as f64)
    }

    /// Exact gradient of [`ModelSpec::loss`].
    pub fn gradient(&self, w: &ParamVector, data: &Dataset, batch: &[usize]) -> Result<ParamVector> {
        self.check(w, data, batch)?;
        let ws = w.as_slice();
        let mut g = vec![0.0; self.param_dim()];
        let inv = 1.0 / batch.len() as f64;
        match self.family {
            ModelFamily::LinearRegression => {
                for &i in batch {
                    let x = data.row(i);
                    let coef = 2.0 * (dot(ws, x) - data.target(i)) * inv;
                    for (gk, xk) in g.iter_mut().zip(x) {
                        *gk += coef * xk;
                    }
                }
            }
            ModelFamily::MultinomialLogistic => {
                let d = self.input_dim;
                let mut z = vec![0.0; self.classes];
                for &i in batch {
                    let x = data.row(i);
                    self.logits(ws, x, &mut z);
                    softmax_in_place(&mut z);
                    z[data.label(i)] -= 1.0;
                    for (h, &err) in z.iter().enumerate() {
                        let coef = err * inv;
                        for (gk, xk) in g[h * d..(h + 1) * d].iter_mut().zip(x) {
                            *gk += coef * xk;
                        }
                        g[d * self.classes + h] += coef;
                    }
                }
            }
        }
        Ok(ParamVector(g))
    }

    /// Real-valued predictions (regression) or argmax class ids, ties to the
    /// lowest class id (classification).
    pub fn predict(&self, w: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.param_dim() {
            return Err(SimError::Dimension {
                expected: self.param_dim(),
                got: w.len(),
            });
        }
        if !features.len().is_multiple_of(self.input_dim) {
            return Err(SimError::Dimension {
                expected: self.input_dim,
                got: features.len() % self.input_dim,
            });
        }
        let ws = w.as_slice();
        Ok(features
            .chunks_exact(self.input_dim)
            .map(|x| self.predict_row(ws, x))
            .collect())
    }

    fn predict_row(&self, w: &[f64], x: &[f64]) -> f64 {
        match self.family {
            ModelFamily::LinearRegression => dot(w, x),
            ModelFamily::MultinomialLogistic => {
                let mut z = vec![0.0; self.classes];
                self.logits(w, x, &mut z);
                argmax(&z) as f64
            }
        }
    }

    /// Test-set mean squared error of a regression model.
    pub fn mse(&self, w: &ParamVector, data: &Dataset) -> Result<f64> {
        if self.family != ModelFamily::LinearRegression {
            return Err(SimError::Kind("MSE needs a regression model".into()));
        }
        self.loss(w, data, &data.all_indices())
    }

    /// Fraction of misclassified rows.
    pub fn error_rate(&self, w: &ParamVector, data: &Dataset) -> Result<f64> {
        if self.family != ModelFamily::MultinomialLogistic {
            return Err(SimError::Kind("error rate needs a classification model".into()));
        }
        self.check(w, data, &data.all_indices())?;
        let pred = self.predict(w, data.features())?;
        let wrong = pred
            .iter()
            .zip(data.targets())
            .filter(|(p, y)| p != y)
            .count();
        Ok(wrong as f64 / data.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (h, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = h;
        }
    }
    best
}

/// Ordinary least squares through the normal equations (Cholesky).
/// Used as a closed-form reference for the regression path.
pub fn least_squares(data: &Dataset) -> Result<ParamVector> {
    if data.kind() != DataKind::Regression {
        return Err(SimError::Kind("least squares needs a regression dataset".into()));
    }
    let d = data.dim();
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for i in 0..data.len() {
        let x = data.row(i);
        let y = data.target(i);
        for a in 0..d {
            rhs[a] += x[a] * y;
            for b in 0..=a {
                gram[a * d + b] += x[a] * x[b];
            }
        }
    }
    // in-place lower Cholesky factor
    for j in 0..d {
        let mut diag = gram[j * d + j];
        for k in 0..j {
            diag -= gram[j * d + k] * gram[j * d + k];
        }
        if diag <= 0.0 {
            return Err(SimError::param("normal equations are singular"));
        }
        let diag = diag.sqrt();
        gram[j * d + j] = diag;
        for i in j + 1..d {
            let mut s = gram[i * d + j];
            for k in 0..j {
                s -= gram[i * d + k] * gram[j * d + k];
            }
            gram[i * d + j] = s / diag;
        }
    }
    let mut y = rhs;
    for i in 0..d {
        for k in 0..i {
            y[i] -= gram[i * d + k] * y[k];
        }
        y[i] /= gram[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            y[i] -= gram[k * d + i] * y[k];
        }
        y[i] /= gram[i * d + i];
    }
    Ok(ParamVector(y))
}
