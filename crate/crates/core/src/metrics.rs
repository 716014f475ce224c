//! Evaluation metrics over benign clients' models.

use serde::Serialize;

use crate::attacks::{asr, AttackKind, AttackSpec};
use crate::data::Dataset;
use crate::error::{Result, SimError};
use crate::model::{ModelSpec, ParamVector};
use crate::protocol::{ExperimentResult, RoundReport};

fn nonempty(models: &[ParamVector]) -> Result<()> {
    if models.is_empty() {
        Err(SimError::UndefinedMetric("no benign client".into()))
    } else {
        Ok(())
    }
}

/// Maximum, with NaN (a diverged model) counted as +inf.
fn max_of(values: &[f64]) -> f64 {
    values
        .iter()
        .map(|&v| if v.is_nan() { f64::INFINITY } else { v })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Test MSE of every model.
pub fn per_client_mse(model: &ModelSpec, models: &[ParamVector], test: &Dataset) -> Result<Vec<f64>> {
    models.iter().map(|w| model.mse(w, test)).collect()
}

pub fn per_client_ter(model: &ModelSpec, models: &[ParamVector], test: &Dataset) -> Result<Vec<f64>> {
    models.iter().map(|w| model.error_rate(w, test)).collect()
}

/// Largest test MSE among the given (benign) models.
pub fn max_mse(model: &ModelSpec, models: &[ParamVector], test: &Dataset) -> Result<f64> {
    nonempty(models)?;
    Ok(max_of(&per_client_mse(model, models, test)?))
}

/// Largest test error rate among the given (benign) models.
pub fn max_ter(model: &ModelSpec, models: &[ParamVector], test: &Dataset) -> Result<f64> {
    nonempty(models)?;
    Ok(max_of(&per_client_ter(model, models, test)?))
}

/// Mean test error rate; reported, but it can hide a few bad clients.
pub fn avg_ter(model: &ModelSpec, models: &[ParamVector], test: &Dataset) -> Result<f64> {
    nonempty(models)?;
    let ter = per_client_ter(model, models, test)?;
    Ok(ter.iter().sum::<f64>() / ter.len() as f64)
}

pub fn max_asr(spec: &AttackSpec, model: &ModelSpec, models: &[ParamVector], test: &Dataset) -> Result<f64> {
    nonempty(models)?;
    let rates: Vec<f64> = models.iter().map(|w| asr(spec, model, w, test)).collect::<Result<_>>()?;
    Ok(max_of(&rates))
}

/// `(1/|B|) sum_i ||w_i - mean(w)||^2`.
pub fn consensus_error<'a>(models: impl IntoIterator<Item = &'a ParamVector>) -> Result<f64> {
    let models: Vec<&ParamVector> = models.into_iter().collect();
    if models.is_empty() {
        return Err(SimError::UndefinedMetric("no benign client".into()));
    }
    let mean = ParamVector::mean(models.iter().copied())?;
    Ok(models.iter().map(|w| w.squared_distance(&mean)).sum::<f64>() / models.len() as f64)
}

/// Message totals over a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommCost {
    pub messages: Vec<u64>,
    pub scalars: Vec<u64>,
}

impl CommCost {
    pub fn total_messages(&self) -> u64 {
        self.messages.iter().sum()
    }

    pub fn total_scalars(&self) -> u64 {
        self.scalars.iter().sum()
    }

    /// Mean messages sent per client.
    pub fn mean_messages(&self) -> f64 {
        if self.messages.is_empty() {
            0.0
        } else {
            self.total_messages() as f64 / self.messages.len() as f64
        }
    }
}

pub fn comm_cost(reports: &[RoundReport]) -> CommCost {
    let n = reports.first().map_or(0, |r| r.messages.len());
    let mut cost = CommCost {
        messages: vec![0; n],
        scalars: vec![0; n],
    };
    for r in reports {
        for i in 0..n {
            cost.messages[i] += r.messages[i];
            cost.scalars[i] += r.scalars[i];
        }
    }
    cost
}

/// Final-round metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub max_mse: Option<f64>,
    pub max_ter: Option<f64>,
    pub avg_ter: Option<f64>,
    pub max_asr: Option<f64>,
    pub consensus_error: f64,
    /// Per benign client (ascending id): test MSE or error rate.
    pub per_client: Vec<f64>,
    pub messages: u64,
    pub scalars: u64,
    pub ops: u64,
}

pub fn summarize(result: &ExperimentResult) -> Result<MetricRecord> {
    let sim = &result.sim;
    let models = result.benign_models();
    let regression = sim.config.dataset.is_regression();
    let (max_mse_v, max_ter_v, avg_ter_v, per_client) = if regression {
        let mse = per_client_mse(&sim.model, &models, &sim.test)?;
        (Some(max_of(&mse)), None, None, mse)
    } else {
        let ter = per_client_ter(&sim.model, &models, &sim.test)?;
        let avg = ter.iter().sum::<f64>() / ter.len() as f64;
        (None, Some(max_of(&ter)), Some(avg), ter)
    };
    let max_asr_v = if sim.config.attack.kind == AttackKind::Backdoor {
        Some(max_asr(&sim.config.attack, &sim.model, &models, &sim.test)?)
    } else {
        None
    };
    let cost = comm_cost(&result.reports);
    Ok(MetricRecord {
        max_mse: max_mse_v,
        max_ter: max_ter_v,
        avg_ter: avg_ter_v,
        max_asr: max_asr_v,
        consensus_error: consensus_error(&models)?,
        per_client,
        messages: cost.total_messages(),
        scalars: cost.total_scalars(),
        ops: result.reports.iter().map(|r| r.ops).sum(),
    })
}
