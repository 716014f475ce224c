//! Aggregation rules, applied by one client to the models it received.
//!
//! Every rule is a pure function of an [`AggregationContext`]. The
//! received list is sorted by sender id before any arithmetic, so results
//! do not depend on delivery order, floating-point summation included.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SimError};
use crate::model::{ModelSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    #[serde(alias = "fed_avg")]
    Fedavg,
    Krum,
    #[serde(alias = "trimmed_mean", alias = "trim")]
    TrimMean,
    Median,
    Fltrust,
    Ubar,
    /// Trimmed-mean combine; the protocol engine adds the extra
    /// update-gossip sub-rounds.
    Learn,
    Scclip,
    Balance,
    BalanceVariant1,
    BalanceVariant2,
}

impl Rule {
    pub const ALL: [Rule; 11] = [
        Rule::Fedavg,
        Rule::Krum,
        Rule::TrimMean,
        Rule::Median,
        Rule::Fltrust,
        Rule::Ubar,
        Rule::Learn,
        Rule::Scclip,
        Rule::Balance,
        Rule::BalanceVariant1,
        Rule::BalanceVariant2,
    ];

    /// The robust baselines clients draw from in the mixed-rule settings.
    pub const ROBUST_BASELINES: [Rule; 6] = [
        Rule::Krum,
        Rule::TrimMean,
        Rule::Median,
        Rule::Fltrust,
        Rule::Ubar,
        Rule::Scclip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Fedavg => "fedavg",
            Rule::Krum => "krum",
            Rule::TrimMean => "trim_mean",
            Rule::Median => "median",
            Rule::Fltrust => "fltrust",
            Rule::Ubar => "ubar",
            Rule::Learn => "learn",
            Rule::Scclip => "scclip",
            Rule::Balance => "balance",
            Rule::BalanceVariant1 => "balance_variant1",
            Rule::BalanceVariant2 => "balance_variant2",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Rule::Fedavg => "FedAvg",
            Rule::Krum => "Krum",
            Rule::TrimMean => "Trim-mean",
            Rule::Median => "Median",
            Rule::Fltrust => "FLTrust",
            Rule::Ubar => "UBAR",
            Rule::Learn => "LEARN",
            Rule::Scclip => "SCCLIP",
            Rule::Balance => "BALANCE",
            Rule::BalanceVariant1 => "BALANCE-V1",
            Rule::BalanceVariant2 => "BALANCE-V2",
        }
    }

    pub fn parse(name: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.name() == name)
    }

    fn uses_trim_count(self) -> bool {
        matches!(self, Rule::Krum | Rule::TrimMean | Rule::Ubar | Rule::Learn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorSpec {
    pub rule: Rule,
    /// Acceptance radius relative to the client's own model norm.
    pub gamma: f64,
    /// Decay rate of the acceptance radius.
    pub kappa: f64,
    /// Give Krum / Trim-mean / UBAR the true count of malicious neighbors.
    pub malicious_oracle: bool,
    /// Assumed malicious fraction when the oracle is off.
    pub assumed_fraction: f64,
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        Self {
            rule: Rule::Balance,
            gamma: 0.3,
            kappa: 1.0,
            malicious_oracle: true,
            assumed_fraction: 0.2,
        }
    }
}

impl AggregatorSpec {
    pub fn new(rule: Rule) -> Self {
        Self {
            rule,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(
            self.rule,
            Rule::Balance | Rule::BalanceVariant1 | Rule::BalanceVariant2
        ) && !(self.gamma > 0.0 && self.gamma.is_finite())
        {
            return Err(SimError::param(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.rule == Rule::Balance && !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(SimError::param(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if !(0.0..1.0).contains(&self.assumed_fraction) {
            return Err(SimError::param("assumed_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Paired evaluation batch used by UBAR's loss comparison.
#[derive(Debug, Clone, Copy)]
pub struct EvalBatch<'a> {
    pub model: &'a ModelSpec,
    pub data: &'a Dataset,
    pub indices: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct AggregationContext<'a> {
    pub self_id: usize,
    /// The client's intermediate model `w_i^{t+1/2}`.
    pub self_model: &'a ParamVector,
    pub received: Vec<(usize, &'a ParamVector)>,
    pub round: usize,
    pub total_rounds: usize,
    pub alpha: f64,
    pub malicious_neighbors: Option<usize>,
    pub eval: Option<EvalBatch<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutcome {
    pub model: ParamVector,
    /// Number of received models that entered the combine step.
    pub accepted: usize,
    /// The rule had nothing to combine and returned the own model.
    pub fallback: bool,
    /// Rough count of scalar operations spent.
    pub ops: u64,
}

/// `lambda(t) = t / T`.
pub fn lambda(round: usize, total_rounds: usize) -> f64 {
    if total_rounds == 0 {
        0.0
    } else {
        round as f64 / total_rounds as f64
    }
}

/// Acceptance radius `gamma * exp(-kappa * lambda(t)) * ||w_i||`.
pub fn balance_threshold(gamma: f64, kappa: f64, round: usize, total_rounds: usize, own_norm: f64) -> f64 {
    gamma * (-kappa * lambda(round, total_rounds)).exp() * own_norm
}

/// Distance-based acceptance test; the boundary is accepted.
pub fn balance_accepts(spec: &AggregatorSpec, ctx: &AggregationContext<'_>, candidate: &ParamVector) -> bool {
    let radius = balance_threshold(
        spec.gamma,
        spec.kappa,
        ctx.round,
        ctx.total_rounds,
        ctx.self_model.norm2(),
    );
    ctx.self_model.distance(candidate) <= radius
}

/// Eq.-2 style update: `alpha * own + (1 - alpha) * AGG(received)`. If the
/// rule keeps nothing (or nothing was received), the own model is returned.
pub fn aggregate(spec: &AggregatorSpec, ctx: &AggregationContext<'_>) -> Result<AggregateOutcome> {
    check_context(ctx)?;
    let pool = sorted_pool(ctx, false);
    let combined = combine(spec, ctx, &pool)?;
    let d = ctx.self_model.len() as u64;
    Ok(match combined.vector {
        Some(agg) => {
            // own + (1 - alpha) (agg - own): exact when agg == own
            let model = if ctx.alpha == 0.0 {
                agg
            } else {
                let mut model = ctx.self_model.clone();
                model.axpy(1.0 - ctx.alpha, &agg.sub(ctx.self_model)?);
                model
            };
            AggregateOutcome {
                model,
                accepted: combined.accepted,
                fallback: false,
                ops: combined.ops + 3 * d,
            }
        }
        None => AggregateOutcome {
            model: ctx.self_model.clone(),
            accepted: 0,
            fallback: true,
            ops: combined.ops,
        },
    })
}

/// Variant that pools the own model with the received ones and skips the
/// alpha mixing.
pub fn aggregate_self_inclusive(spec: &AggregatorSpec, ctx: &AggregationContext<'_>) -> Result<AggregateOutcome> {
    check_context(ctx)?;
    let pool = sorted_pool(ctx, true);
    let combined = combine(spec, ctx, &pool)?;
    Ok(match combined.vector {
        Some(model) => AggregateOutcome {
            model,
            // the own model is not a received one
            accepted: combined.accepted.saturating_sub(usize::from(combined.own_kept)),
            fallback: false,
            ops: combined.ops,
        },
        None => AggregateOutcome {
            model: ctx.self_model.clone(),
            accepted: 0,
            fallback: true,
            ops: combined.ops,
        },
    })
}

fn check_context(ctx: &AggregationContext<'_>) -> Result<()> {
    if !(0.0..=1.0).contains(&ctx.alpha) {
        return Err(SimError::param(format!("alpha={} outside [0, 1]", ctx.alpha)));
    }
    let d = ctx.self_model.len();
    for (id, w) in &ctx.received {
        if w.len() != d {
            return Err(SimError::Dimension {
                expected: d,
                got: w.len(),
            });
        }
        if *id == ctx.self_id {
            return Err(SimError::param("a client cannot receive its own model"));
        }
    }
    Ok(())
}

fn sorted_pool<'a>(ctx: &AggregationContext<'a>, include_self: bool) -> Vec<(usize, &'a ParamVector)> {
    let mut pool = ctx.received.clone();
    if include_self {
        pool.push((ctx.self_id, ctx.self_model));
    }
    pool.sort_by_key(|&(id, _)| id);
    pool
}

struct Combined {
    vector: Option<ParamVector>,
    accepted: usize,
    own_kept: bool,
    ops: u64,
}

fn combine(spec: &AggregatorSpec, ctx: &AggregationContext<'_>, pool: &[(usize, &ParamVector)]) -> Result<Combined> {
    let own = ctx.self_model;
    let d = own.len() as u64;
    let n = pool.len();
    if n == 0 {
        return Ok(Combined {
            vector: None,
            accepted: 0,
            own_kept: false,
            ops: 0,
        });
    }
    let own_in_pool = pool.iter().any(|&(id, _)| id == ctx.self_id);
    let trim = if spec.rule.uses_trim_count() {
        trim_count(spec, ctx, n)
    } else {
        0
    };
    let vectors: Vec<&ParamVector> = pool.iter().map(|&(_, w)| w).collect();
    let nn = n as u64;

    let (kept, ops): (Vec<usize>, u64) = match spec.rule {
        Rule::Fedavg => ((0..n).collect(), nn * d),
        Rule::Krum => (vec![krum_select(&vectors, trim)], nn * nn * d),
        Rule::TrimMean | Rule::Learn => {
            return Ok(Combined {
                vector: Some(trimmed_mean(&vectors, trim)),
                accepted: n,
                own_kept: own_in_pool,
                ops: nn * d * (1 + log2_ceil(n) as u64),
            });
        }
        Rule::Median => {
            return Ok(Combined {
                vector: Some(coordinate_median(&vectors)),
                accepted: n,
                own_kept: own_in_pool,
                ops: nn * d * (1 + log2_ceil(n) as u64),
            });
        }
        Rule::Fltrust => {
            let own_norm = own.norm2();
            let keep: Vec<usize> = (0..n)
                .filter(|&j| {
                    let norm = vectors[j].norm2();
                    own_norm > 0.0 && norm > 0.0 && own.dot(vectors[j]).unwrap_or(0.0) > 0.0
                })
                .collect();
            if keep.is_empty() {
                return Ok(empty(3 * nn * d));
            }
            let rescaled: Vec<ParamVector> = keep
                .iter()
                .map(|&j| vectors[j].scale(own_norm / vectors[j].norm2()))
                .collect();
            return Ok(Combined {
                vector: Some(ParamVector::mean(&rescaled)?),
                accepted: keep.len(),
                own_kept: keep.iter().any(|&j| pool[j].0 == ctx.self_id),
                ops: 4 * nn * d,
            });
        }
        Rule::Ubar => {
            let eval = ctx
                .eval
                .ok_or_else(|| SimError::param("UBAR needs an evaluation batch"))?;
            let keep = ubar_select(own, &vectors, trim, &eval)?;
            let ops = nn * d * (2 + 2 * eval.indices.len() as u64);
            (keep, ops)
        }
        Rule::Scclip => {
            let radius = own.norm2();
            let clipped: Vec<ParamVector> = vectors
                .iter()
                .map(|w| {
                    let diff = w.sub(own).expect("dimensions checked");
                    let dist = diff.norm2();
                    if !dist.is_finite() {
                        // nothing finite to clip toward
                        return own.clone();
                    }
                    let factor = if dist > radius { radius / dist } else { 1.0 };
                    let mut out = own.clone();
                    out.axpy(factor, &diff);
                    out
                })
                .collect();
            return Ok(Combined {
                vector: Some(ParamVector::mean(&clipped)?),
                accepted: n,
                own_kept: own_in_pool,
                ops: 4 * nn * d,
            });
        }
        Rule::Balance => {
            let keep = (0..n).filter(|&j| balance_accepts(spec, ctx, vectors[j])).collect();
            (keep, 3 * nn * d)
        }
        Rule::BalanceVariant1 => {
            let radius = spec.gamma * own.norm2();
            let keep = (0..n).filter(|&j| own.distance(vectors[j]) <= radius).collect();
            (keep, 3 * nn * d)
        }
        Rule::BalanceVariant2 => {
            let own_norm = own.norm2();
            let ratios: Vec<f64> = vectors
                .iter()
                .map(|w| {
                    let dist = own.distance(w);
                    if own_norm > 0.0 {
                        dist / own_norm
                    } else if dist == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                })
                .collect();
            let cutoff = median_of(&ratios).min(spec.gamma);
            let keep = (0..n).filter(|&j| ratios[j] <= cutoff).collect();
            (keep, 3 * nn * d + nn * log2_ceil(n) as u64)
        }
    };
    if kept.is_empty() {
        return Ok(empty(ops));
    }
    let own_kept = kept.iter().any(|&j| pool[j].0 == ctx.self_id);
    Ok(Combined {
        vector: Some(ParamVector::mean(kept.iter().map(|&j| vectors[j]))?),
        accepted: kept.len(),
        own_kept,
        ops,
    })
}

fn empty(ops: u64) -> Combined {
    Combined {
        vector: None,
        accepted: 0,
        own_kept: false,
        ops,
    }
}

/// `ceil(c_i * |pool|)`: the oracle count of malicious neighbors, or the
/// assumed fraction of the pool.
fn trim_count(spec: &AggregatorSpec, ctx: &AggregationContext<'_>, pool_len: usize) -> usize {
    if spec.malicious_oracle {
        ctx.malicious_neighbors.unwrap_or(0)
    } else {
        (spec.assumed_fraction * pool_len as f64).ceil() as usize
    }
}

/// Ordering key: NaN (from a diverged model) ranks as +inf.
fn rank(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn log2_ceil(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// Krum: index of the vector with the smallest sum of squared distances to
/// its `n - trim - 2` nearest peers (clamped to `1..=n-1`). Ties go to the
/// lowest index.
pub fn krum_select(vectors: &[&ParamVector], trim: usize) -> usize {
    let n = vectors.len();
    if n <= 1 {
        return 0;
    }
    let k = n.saturating_sub(trim + 2).clamp(1, n - 1);
    let mut dist = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let s = rank(vectors[a].squared_distance(vectors[b]));
            dist[a * n + b] = s;
            dist[b * n + a] = s;
        }
    }
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    let mut row = Vec::with_capacity(n - 1);
    for a in 0..n {
        row.clear();
        row.extend((0..n).filter(|&b| b != a).map(|b| dist[a * n + b]));
        row.sort_by(f64::total_cmp);
        let score: f64 = row[..k].iter().sum();
        if score < best_score {
            best_score = score;
            best = a;
        }
    }
    best
}

/// Per coordinate: drop the `trim` largest and smallest values, average
/// the rest. `trim` is clamped so at least one value survives.
pub fn trimmed_mean(vectors: &[&ParamVector], trim: usize) -> ParamVector {
    let n = vectors.len();
    let trim = trim.min((n - 1) / 2);
    let d = vectors[0].len();
    let mut column = vec![0.0; n];
    let out = (0..d)
        .map(|k| {
            for (c, v) in column.iter_mut().zip(vectors) {
                *c = rank(v[k]);
            }
            column.sort_by(f64::total_cmp);
            let kept = &column[trim..n - trim];
            let base = kept[0];
            base + kept.iter().map(|v| v - base).sum::<f64>() / kept.len() as f64
        })
        .collect();
    ParamVector::new(out)
}

/// Coordinate-wise median; even counts average the two middle values.
pub fn coordinate_median(vectors: &[&ParamVector]) -> ParamVector {
    let d = vectors[0].len();
    let mut column = vec![0.0; vectors.len()];
    let out = (0..d)
        .map(|k| {
            for (c, v) in column.iter_mut().zip(vectors) {
                *c = v[k];
            }
            median_of(&column)
        })
        .collect();
    ParamVector::new(out)
}

pub(crate) fn median_of(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| rank(x)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Stage 1 keeps the `n - trim` vectors closest to the own model; stage 2
/// keeps those whose loss on the paired batch is at most the own loss. If
/// stage 2 keeps nothing, the stage-1 vector with the smallest loss is used.
fn ubar_select(own: &ParamVector, vectors: &[&ParamVector], trim: usize, eval: &EvalBatch<'_>) -> Result<Vec<usize>> {
    let n = vectors.len();
    let keep = n.saturating_sub(trim).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let dists: Vec<f64> = vectors.iter().map(|w| rank(own.distance(w))).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    order.truncate(keep);
    let own_loss = eval.model.loss(own, eval.data, eval.indices)?;
    let losses: Vec<(usize, f64)> = order
        .iter()
        .map(|&j| eval.model.loss(vectors[j], eval.data, eval.indices).map(|l| (j, l)))
        .collect::<Result<_>>()?;
    let mut survivors: Vec<usize> = losses
        .iter()
        .filter(|&&(_, l)| l <= own_loss)
        .map(|&(j, _)| j)
        .collect();
    if survivors.is_empty() {
        let (best, _) = losses
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("stage 1 keeps at least one vector");
        survivors.push(best);
    }
    survivors.sort_unstable();
    Ok(survivors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataKind;

    #[test]
    fn robust_rules_survive_diverged_neighbors() {
        let own = ParamVector::new(vec![1.0, 1.0]);
        let good = [ParamVector::new(vec![1.1, 0.9]), ParamVector::new(vec![0.9, 1.2]), ParamVector::new(vec![1.0, 1.05])];
        let nan = ParamVector::new(vec![f64::NAN, f64::INFINITY]);
        let data = Dataset::new(vec![1.0, 0.0], 2, vec![1.0], DataKind::Regression).unwrap();
        let model = ModelSpec::linear(2);
        for rule in [Rule::Krum, Rule::TrimMean, Rule::Median, Rule::Fltrust, Rule::Ubar, Rule::Scclip, Rule::Balance, Rule::BalanceVariant1, Rule::BalanceVariant2] {
            let ctx = AggregationContext {
                self_id: 0,
                self_model: &own,
                received: vec![(1, &good[0]), (2, &good[1]), (3, &good[2]), (4, &nan)],
                round: 0,
                total_rounds: 10,
                alpha: 0.5,
                malicious_neighbors: Some(1),
                eval: Some(EvalBatch { model: &model, data: &data, indices: &[0] }),
            };
            let out = aggregate(&AggregatorSpec::new(rule), &ctx).unwrap();
            assert!(out.model.is_finite(), "{rule:?}: {}", out.model);
        }
    }
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    fn ctx<'a>(own: &'a ParamVector, received: &'a [ParamVector], alpha: f64) -> AggregationContext<'a> {
        AggregationContext {
            self_id: 0,
            self_model: own,
            received: received.iter().enumerate().map(|(j, w)| (j + 1, w)).collect(),
            round: 0,
            total_rounds: 10,
            alpha,
            malicious_neighbors: Some(1),
            eval: None,
        }
    }

    fn agg_of(rule: Rule, own: &ParamVector, received: &[ParamVector]) -> ParamVector {
        // alpha = 0 exposes the raw AGG output
        aggregate(&AggregatorSpec::new(rule), &ctx(own, received, 0.0)).unwrap().model
    }

    #[test]
    fn balance_acceptance_examples() {
        let spec = AggregatorSpec::default();
        let own = pv(&[3.0, 4.0]);
        let c = ctx(&own, &[], 0.5);
        assert!(balance_accepts(&spec, &c, &own));
        assert!(balance_accepts(&spec, &c, &pv(&[3.0, 4.5])));
        assert!(!balance_accepts(&spec, &c, &pv(&[30.0, 40.0])));
        // the boundary itself is accepted: radius is exactly 1.5 here
        assert!(balance_accepts(&spec, &c, &pv(&[3.0, 5.5])));
    }

    #[test]
    fn threshold_decays_with_rounds() {
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let r = balance_threshold(0.3, 1.0, t, 50, 2.0);
            assert!(r <= prev);
            prev = r;
        }
        assert!((balance_threshold(0.3, 1.0, 50, 50, 1.0) - 0.3 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn balance_mixing_example() {
        let own = pv(&[2.0, 2.0]);
        let recv = [pv(&[0.0, 0.0])];
        let mut spec = AggregatorSpec::new(Rule::Balance);
        spec.gamma = 10.0;
        let out = aggregate(&spec, &ctx(&own, &recv, 0.5)).unwrap();
        assert_eq!(out.model.as_slice(), &[1.0, 1.0]);
        assert_eq!(out.accepted, 1);
        assert!(!out.fallback);
    }

    #[test]
    fn balance_empty_acceptance_falls_back_to_own() {
        let own = pv(&[1.0, 1.0]);
        let recv = [pv(&[100.0, -50.0]), pv(&[-80.0, 9.0])];
        let out = aggregate(&AggregatorSpec::default(), &ctx(&own, &recv, 0.5)).unwrap();
        assert_eq!(out.model, own);
        assert!(out.fallback);
        assert_eq!(out.accepted, 0);
    }

    #[test]
    fn no_neighbors_keeps_own_model() {
        let own = pv(&[1.0, -2.0]);
        for rule in Rule::ALL {
            let out = aggregate(&AggregatorSpec::new(rule), &ctx(&own, &[], 0.5)).unwrap();
            assert_eq!(out.model, own, "{rule:?}");
        }
    }

    #[test]
    fn median_and_trim_examples() {
        let own = pv(&[0.0, 0.0]);
        let recv = [pv(&[1.0, 5.0]), pv(&[2.0, 4.0]), pv(&[3.0, 0.0])];
        assert_eq!(agg_of(Rule::Median, &own, &recv).as_slice(), &[2.0, 4.0]);
        let even = [pv(&[1.0]), pv(&[4.0]), pv(&[2.0]), pv(&[10.0])];
        assert_eq!(agg_of(Rule::Median, &pv(&[0.0]), &even).as_slice(), &[3.0]);
        let five: Vec<ParamVector> = [5.0, 1.0, 4.0, 2.0, 3.0].iter().map(|&v| pv(&[v])).collect();
        assert_eq!(agg_of(Rule::TrimMean, &pv(&[0.0]), &five).as_slice(), &[3.0]);
    }

    #[test]
    fn krum_picks_the_clustered_vector() {
        let recv = [
            pv(&[0.0, 0.0]),
            pv(&[0.1, 0.0]),
            pv(&[0.0, 0.1]),
            pv(&[0.05, 0.05]),
            pv(&[50.0, 50.0]),
        ];
        let out = agg_of(Rule::Krum, &pv(&[0.0, 0.0]), &recv);
        assert_eq!(out, recv[3]);
    }

    #[test]
    fn fltrust_rescales_and_drops_opposing() {
        let own = pv(&[3.0, 4.0]);
        let recv = [pv(&[6.0, 8.0]), pv(&[-3.0, -4.0])];
        let out = agg_of(Rule::Fltrust, &own, &recv);
        assert!(out.distance(&own) < 1e-12);
        let all_opposing = [pv(&[-1.0, 0.0])];
        let out = aggregate(&AggregatorSpec::new(Rule::Fltrust), &ctx(&own, &all_opposing, 0.5)).unwrap();
        assert!(out.fallback);
        assert_eq!(out.model, own);
    }

    #[test]
    fn scclip_clips_to_own_norm() {
        let own = pv(&[3.0, 4.0]);
        let recv = [pv(&[103.0, 4.0])];
        let out = agg_of(Rule::Scclip, &own, &recv);
        assert!((out.distance(&own) - 5.0).abs() < 1e-12);
        assert!((out[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn balance_variants() {
        let own = pv(&[10.0, 0.0]);
        let recv = [pv(&[10.5, 0.0]), pv(&[12.0, 0.0]), pv(&[14.0, 0.0])];
        let spec = |rule| AggregatorSpec {
            rule,
            gamma: 0.3,
            ..Default::default()
        };
        // variant 1: radius 3.0 -> accepts 0.5 and 2.0 deviations
        let out = aggregate(&spec(Rule::BalanceVariant1), &ctx(&own, &recv, 0.0)).unwrap();
        assert_eq!(out.accepted, 2);
        assert_eq!(out.model.as_slice(), &[11.25, 0.0]);
        // variant 2: ratios 0.05, 0.2, 0.4; median 0.2 -> cutoff 0.2
        let out = aggregate(&spec(Rule::BalanceVariant2), &ctx(&own, &recv, 0.0)).unwrap();
        assert_eq!(out.accepted, 2);
        // tighter gamma than the median
        let mut tight = spec(Rule::BalanceVariant2);
        tight.gamma = 0.1;
        assert_eq!(aggregate(&tight, &ctx(&own, &recv, 0.0)).unwrap().accepted, 1);
    }

    #[test]
    fn ubar_two_stages() {
        let data = Dataset::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![1.0, 1.0], DataKind::Regression).unwrap();
        let spec = ModelSpec::linear(2);
        let idx = [0usize, 1];
        let own = pv(&[0.5, 0.5]);
        // close & better, close & worse, far & perfect (dropped in stage 1)
        let recv = [pv(&[0.9, 0.9]), pv(&[0.2, 0.2]), pv(&[1.0, 1.0 + 1e-9]).scale(1.0)];
        let mut far = recv.to_vec();
        far[2] = pv(&[1.0, 5.0]);
        let mut c = ctx(&own, &far, 0.0);
        c.eval = Some(EvalBatch {
            model: &spec,
            data: &data,
            indices: &idx,
        });
        let out = aggregate(&AggregatorSpec::new(Rule::Ubar), &c).unwrap();
        assert_eq!(out.accepted, 1);
        assert_eq!(out.model, far[0]);

        // stage 2 empty -> stage-1 minimiser of loss
        let worse = [pv(&[0.1, 0.1]), pv(&[0.0, 0.0])];
        let mut c = ctx(&own, &worse, 0.0);
        c.malicious_neighbors = Some(0);
        c.eval = Some(EvalBatch {
            model: &spec,
            data: &data,
            indices: &idx,
        });
        let out = aggregate(&AggregatorSpec::new(Rule::Ubar), &c).unwrap();
        assert_eq!(out.model, worse[0]);

        let no_eval = ctx(&own, &worse, 0.0);
        assert!(aggregate(&AggregatorSpec::new(Rule::Ubar), &no_eval).is_err());
    }

    #[test]
    fn self_inclusive_examples() {
        let own = pv(&[2.0, 2.0]);
        let recv = [pv(&[0.0, 0.0])];
        let c = ctx(&own, &recv, 0.5);
        let out = aggregate_self_inclusive(&AggregatorSpec::new(Rule::Fedavg), &c).unwrap();
        assert_eq!(out.model.as_slice(), &[1.0, 1.0]);

        let recv3 = [pv(&[5.0, -1.0]), pv(&[-4.0, 7.0])];
        let out = aggregate_self_inclusive(&AggregatorSpec::new(Rule::Median), &ctx(&own, &recv3, 0.5)).unwrap();
        assert_eq!(out.model.as_slice(), &[2.0, 2.0]);

        // own model always passes the BALANCE test, so no fallback even when
        // every neighbor is rejected
        let far = [pv(&[100.0, 100.0])];
        let out = aggregate_self_inclusive(&AggregatorSpec::default(), &ctx(&own, &far, 0.5)).unwrap();
        assert!(!out.fallback);
        assert_eq!(out.model, own);
        assert_eq!(out.accepted, 0);
    }

    #[test]
    fn rejects_bad_context() {
        let own = pv(&[1.0, 1.0]);
        let recv = [pv(&[1.0])];
        assert!(matches!(
            aggregate(&AggregatorSpec::new(Rule::Fedavg), &ctx(&own, &recv, 0.5)),
            Err(SimError::Dimension { .. })
        ));
        assert!(aggregate(&AggregatorSpec::new(Rule::Fedavg), &ctx(&own, &[], 1.5)).is_err());
        let bad = AggregatorSpec {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rule_names_round_trip() {
        for rule in Rule::ALL {
            assert_eq!(Rule::parse(rule.name()), Some(rule));
        }
    }

    fn random_pool(seed: u64) -> (ParamVector, Vec<ParamVector>) {
        let mut rng = substream(seed, "test/pool", &[]);
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=4);
        let draw = |rng: &mut crate::rng::SimRng| pv(&(0..d).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>());
        let own = draw(&mut rng);
        let received = (0..n).map(|_| draw(&mut rng)).collect();
        (own, received)
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..10_000, perm_seed in 0u64..1_000) {
            let (own, received) = random_pool(seed);
            let mut order: Vec<usize> = (0..received.len()).collect();
            order.shuffle(&mut substream(perm_seed, "test/perm", &[]));
            let c1 = ctx(&own, &received, 0.5);
            let mut c2 = c1.clone();
            c2.received = order.iter().map(|&j| c1.received[j]).collect();
            for rule in Rule::ALL.into_iter().filter(|r| *r != Rule::Ubar) {
                let spec = AggregatorSpec::new(rule);
                prop_assert_eq!(aggregate(&spec, &c1).unwrap(), aggregate(&spec, &c2).unwrap());
            }
        }

        #[test]
        fn hull_containment(seed in 0u64..10_000) {
            let (own, received) = random_pool(seed);
            let mut spec_big = AggregatorSpec::new(Rule::Balance);
            spec_big.gamma = 5.0;
            for spec in [
                AggregatorSpec::new(Rule::Fedavg),
                AggregatorSpec::new(Rule::TrimMean),
                AggregatorSpec::new(Rule::Median),
                spec_big,
            ] {
                let out = aggregate(&spec, &ctx(&own, &received, 0.0)).unwrap();
                if out.fallback {
                    continue;
                }
                for k in 0..own.len() {
                    let lo = received.iter().map(|w| w[k]).fold(f64::INFINITY, f64::min);
                    let hi = received.iter().map(|w| w[k]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out.model[k] >= lo - 1e-12 && out.model[k] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn mixing_lies_on_segment(seed in 0u64..10_000, alpha in 0.0f64..=1.0) {
            let (own, received) = random_pool(seed);
            let spec = AggregatorSpec::new(Rule::Fedavg);
            let raw = aggregate(&spec, &ctx(&own, &received, 0.0)).unwrap().model;
            let mixed = aggregate(&spec, &ctx(&own, &received, alpha)).unwrap().model;
            // mixed = own + (1 - alpha) (raw - own)
            for k in 0..own.len() {
                let expect = own[k] + (1.0 - alpha) * (raw[k] - own[k]);
                prop_assert!((mixed[k] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn krum_returns_a_received_vector(seed in 0u64..10_000) {
            let (own, received) = random_pool(seed);
            let out = agg_of(Rule::Krum, &own, &received);
            prop_assert!(received.contains(&out));
        }

        #[test]
        fn fixed_point_when_all_equal(seed in 0u64..10_000) {
            let (own, received) = random_pool(seed);
            let copies = vec![own.clone(); received.len()];
            let data = Dataset::new(vec![1.0; own.len()], own.len(), vec![0.0], DataKind::Regression).unwrap();
            let model = ModelSpec::linear(own.len());
            let idx = [0usize];
            for rule in Rule::ALL {
                let mut c = ctx(&own, &copies, 0.5);
                c.eval = Some(EvalBatch { model: &model, data: &data, indices: &idx });
                let out = aggregate(&AggregatorSpec::new(rule), &c).unwrap();
                for k in 0..own.len() {
                    prop_assert!((out.model[k] - own[k]).abs() <= 1e-12 * (1.0 + own[k].abs()), "{:?}", rule);
                }
            }
        }

        #[test]
        fn scclip_deviation_bounded(seed in 0u64..10_000) {
            let (own, received) = random_pool(seed);
            let out = agg_of(Rule::Scclip, &own, &received);
            prop_assert!(out.distance(&own) <= own.norm2() * (1.0 + 1e-12));
        }
    }
}
