//! Poisoning behaviour of malicious clients.
//!
//! Data attacks rewrite a malicious client's shard before training; model
//! attacks replace what a malicious client sends. Model attacks see the
//! whole round (every client's committed and intermediate model, the
//! topology and each client's defence parameters) and may send a
//! different model to every neighbor.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{balance_threshold, krum_select, AggregatorSpec};
use crate::data::{normal_vec, DataKind, Dataset};
use crate::error::{Result, SimError};
use crate::graph::Topology;
use crate::model::{ModelSpec, ParamVector};
use crate::rng::substream;

/// Keeps adaptive payloads strictly inside the acceptance radius despite
/// rounding in the distance computation.
const BOUNDARY_SHRINK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    #[serde(alias = "lf")]
    LabelFlip,
    Feature,
    #[serde(alias = "gauss")]
    Gaussian,
    #[serde(alias = "krum")]
    KrumAttack,
    #[serde(alias = "trim")]
    TrimAttack,
    Backdoor,
    #[serde(alias = "adapt")]
    Adaptive,
    Lie,
    Dissensus,
}

impl AttackKind {
    pub const ALL: [AttackKind; 10] = [
        AttackKind::None,
        AttackKind::LabelFlip,
        AttackKind::Feature,
        AttackKind::Gaussian,
        AttackKind::KrumAttack,
        AttackKind::TrimAttack,
        AttackKind::Backdoor,
        AttackKind::Adaptive,
        AttackKind::Lie,
        AttackKind::Dissensus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::Feature => "feature",
            AttackKind::Gaussian => "gaussian",
            AttackKind::KrumAttack => "krum_attack",
            AttackKind::TrimAttack => "trim_attack",
            AttackKind::Backdoor => "backdoor",
            AttackKind::Adaptive => "adaptive",
            AttackKind::Lie => "lie",
            AttackKind::Dissensus => "dissensus",
        }
    }

    /// Column heading used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            AttackKind::None => "No",
            AttackKind::LabelFlip => "LF",
            AttackKind::Feature => "Feature",
            AttackKind::Gaussian => "Gauss",
            AttackKind::KrumAttack => "Krum",
            AttackKind::TrimAttack => "Trim",
            AttackKind::Backdoor => "Backdoor",
            AttackKind::Adaptive => "Adapt",
            AttackKind::Lie => "LIE",
            AttackKind::Dissensus => "Dissensus",
        }
    }

    pub fn parse(name: &str) -> Option<AttackKind> {
        AttackKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn poisons_data(self) -> bool {
        matches!(self, AttackKind::LabelFlip | AttackKind::Feature | AttackKind::Backdoor)
    }

    /// Whether malicious clients replace what they send.
    pub fn crafts_models(self) -> bool {
        !matches!(self, AttackKind::None | AttackKind::LabelFlip | AttackKind::Feature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Variance of the Gaussian attack's coordinates.
    pub gaussian_variance: f64,
    /// Variance of the noise replacing features in the feature attack.
    pub feature_variance: f64,
    /// Bias added to regression targets by label flipping.
    pub label_bias: f64,
    pub flip_from: usize,
    pub flip_to: usize,
    pub trigger_feature: usize,
    pub trigger_value: f64,
    pub target_label: usize,
    /// Backdoor scaling factor; `None` means the total client count.
    pub backdoor_scale: Option<f64>,
    /// Trim attack: width of the sampling interval relative to |min| / |max|.
    pub trim_spread: f64,
    pub krum_search_steps: usize,
    /// Dissensus step size.
    pub dissensus_eps: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            gaussian_variance: 200.0,
            feature_variance: 1_000.0,
            label_bias: 5.0,
            flip_from: 3,
            flip_to: 5,
            trigger_feature: 0,
            trigger_value: 10.0,
            target_label: 0,
            backdoor_scale: None,
            trim_spread: 1.0,
            krum_search_steps: 20,
            dissensus_eps: 1.0,
        }
    }
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_variance > 0.0 && self.feature_variance > 0.0) {
            return Err(SimError::param("attack variances must be > 0"));
        }
        if !(self.trim_spread >= 0.0 && self.dissensus_eps >= 0.0) {
            return Err(SimError::param("trim_spread and dissensus_eps must be >= 0"));
        }
        if let Some(s) = self.backdoor_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(SimError::param("backdoor_scale must be > 0"));
            }
        }
        Ok(())
    }
}

/// Rewrite a malicious shard for the label-flip or feature attack.
pub fn poison_data(spec: &AttackSpec, shard: &Dataset, seed: u64) -> Result<Dataset> {
    let mut out = shard.clone();
    match spec.kind {
        AttackKind::LabelFlip => match shard.kind() {
            DataKind::Regression => {
                for y in out.targets_mut() {
                    *y += spec.label_bias;
                }
            }
            DataKind::Classification { classes: 2 } => {
                for y in out.targets_mut() {
                    *y = 1.0 - *y;
                }
            }
            DataKind::Classification { classes } => {
                if spec.flip_from >= classes || spec.flip_to >= classes {
                    return Err(SimError::param(format!(
                        "label flip {} -> {} needs more than {classes} classes",
                        spec.flip_from, spec.flip_to
                    )));
                }
                for y in out.targets_mut() {
                    if *y as usize == spec.flip_from {
                        *y = spec.flip_to as f64;
                    }
                }
            }
        },
        AttackKind::Feature => {
            let mut rng = substream(seed, "attack/feature", &[]);
            let std = spec.feature_variance.sqrt();
            for i in 0..out.len() {
                let noise = normal_vec(&mut rng, out.dim(), 0.0, std);
                out.row_mut(i).copy_from_slice(&noise);
            }
        }
        other => {
            return Err(SimError::param(format!(
                "{} is not a data-poisoning attack",
                other.name()
            )))
        }
    }
    Ok(out)
}

fn stamp_trigger(spec: &AttackSpec, row: &mut [f64]) {
    row[spec.trigger_feature] = spec.trigger_value;
}

fn check_backdoor(spec: &AttackSpec, data: &Dataset) -> Result<usize> {
    let classes = data
        .classes()
        .ok_or_else(|| SimError::Kind("backdoor attacks need a classification task".into()))?;
    if spec.target_label >= classes {
        return Err(SimError::param(format!("target label {} >= {classes}", spec.target_label)));
    }
    if spec.trigger_feature >= data.dim() {
        return Err(SimError::param(format!("trigger feature {} >= dim {}", spec.trigger_feature, data.dim())));
    }
    Ok(classes)
}

/// Shard plus one trigger-stamped, target-labelled copy of every example.
pub fn backdoor_augment(spec: &AttackSpec, shard: &Dataset) -> Result<Dataset> {
    check_backdoor(spec, shard)?;
    let mut copies = shard.clone();
    for i in 0..copies.len() {
        stamp_trigger(spec, copies.row_mut(i));
    }
    for y in copies.targets_mut() {
        *y = spec.target_label as f64;
    }
    let mut out = shard.clone();
    out.extend(&copies)?;
    Ok(out)
}

/// Fraction of triggered test examples (those not already of the target
/// class) that the model assigns to the target class.
pub fn asr(spec: &AttackSpec, model: &ModelSpec, w: &ParamVector, test: &Dataset) -> Result<f64> {
    check_backdoor(spec, test)?;
    let mut stamped = Vec::new();
    for i in (0..test.len()).filter(|&i| test.label(i) != spec.target_label) {
        let mut row = test.row(i).to_vec();
        stamp_trigger(spec, &mut row);
        stamped.extend(row);
    }
    if stamped.is_empty() {
        return Err(SimError::UndefinedMetric("no test example outside the target class".into()));
    }
    let preds = model.predict(w, &stamped)?;
    let hits = preds.iter().filter(|&&p| p as usize == spec.target_label).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Read-only snapshot of one round, as seen by the attacker.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    pub topology: &'a Topology,
    /// Committed models `w^t`, indexed by client id.
    pub previous: &'a [ParamVector],
    /// Intermediate models `w^{t+1/2}`, indexed by client id.
    pub intermediate: &'a [ParamVector],
    pub active: &'a [bool],
    /// Each client's aggregation rule and parameters.
    pub defenses: &'a [AggregatorSpec],
    pub round: usize,
    pub total_rounds: usize,
    pub seed: u64,
}

impl AttackContext<'_> {
    fn benign_active(&self) -> Vec<usize> {
        (0..self.topology.n())
            .filter(|&i| self.active[i] && !self.topology.is_malicious(i))
            .collect()
    }

    fn targets(&self, malicious_id: usize) -> Vec<usize> {
        self.topology
            .neighbors(malicious_id)
            .iter()
            .copied()
            .filter(|&j| self.active[j] && !self.topology.is_malicious(j))
            .collect()
    }

    fn benign_mean(&self, benign: &[usize]) -> Result<ParamVector> {
        ParamVector::mean(benign.iter().map(|&i| &self.intermediate[i]))
    }

    fn benign_mean_update(&self, benign: &[usize]) -> Result<ParamVector> {
        let updates: Vec<ParamVector> = benign
            .iter()
            .map(|&i| self.intermediate[i].sub(&self.previous[i]))
            .collect::<Result<_>>()?;
        ParamVector::mean(&updates)
    }
}

/// Per-neighbor payloads of one malicious client.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CraftOutcome {
    pub payloads: BTreeMap<usize, ParamVector>,
    /// The attack lacked the benign statistics it needs and sent Gaussian
    /// noise to at least one neighbor.
    pub fell_back: bool,
}

/// Models that malicious client `malicious_id` sends to each of its active
/// benign neighbors this round.
pub fn craft_models(spec: &AttackSpec, ctx: &AttackContext<'_>, malicious_id: usize) -> Result<CraftOutcome> {
    if !ctx.topology.is_malicious(malicious_id) {
        return Err(SimError::param(format!("client {malicious_id} is not malicious")));
    }
    let targets = ctx.targets(malicious_id);
    let mut out = CraftOutcome::default();
    if targets.is_empty() {
        return Ok(out);
    }
    let own = &ctx.intermediate[malicious_id];
    let benign = ctx.benign_active();
    let needs_benign = matches!(
        spec.kind,
        AttackKind::KrumAttack | AttackKind::TrimAttack | AttackKind::Adaptive | AttackKind::Lie
    );
    if needs_benign && benign.is_empty() {
        let g = gaussian_payload(spec, ctx, malicious_id, own.len());
        out.fell_back = true;
        out.payloads = targets.into_iter().map(|j| (j, g.clone())).collect();
        return Ok(out);
    }
    let broadcast = |v: ParamVector| -> BTreeMap<usize, ParamVector> {
        targets.iter().map(|&j| (j, v.clone())).collect()
    };
    match spec.kind {
        AttackKind::None | AttackKind::LabelFlip | AttackKind::Feature => {
            out.payloads = broadcast(own.clone());
        }
        AttackKind::Backdoor => {
            let scale = spec
                .backdoor_scale
                .unwrap_or(ctx.topology.n() as f64);
            out.payloads = broadcast(own.scale(scale));
        }
        AttackKind::Gaussian => {
            out.payloads = broadcast(gaussian_payload(spec, ctx, malicious_id, own.len()));
        }
        AttackKind::KrumAttack => {
            let (crafted, found) = krum_attack_vector(spec, ctx, &benign)?;
            out.fell_back = !found;
            out.payloads = broadcast(crafted);
        }
        AttackKind::TrimAttack => {
            out.payloads = broadcast(trim_attack_vector(spec, ctx, &benign, malicious_id)?);
        }
        AttackKind::Lie => {
            out.payloads = broadcast(lie_vector(ctx, &benign)?);
        }
        AttackKind::Adaptive => {
            let update = ctx.benign_mean_update(&benign)?;
            for &i in &targets {
                out.payloads.insert(i, adaptive_payload(ctx, i, &update));
            }
        }
        AttackKind::Dissensus => {
            for &i in &targets {
                let peers: Vec<&ParamVector> = ctx
                    .topology
                    .neighbors(i)
                    .iter()
                    .filter(|&&j| ctx.active[j] && !ctx.topology.is_malicious(j))
                    .map(|&j| &ctx.intermediate[j])
                    .collect();
                let payload = if peers.is_empty() {
                    out.fell_back = true;
                    gaussian_payload(spec, ctx, malicious_id, own.len())
                } else {
                    let w_i = &ctx.intermediate[i];
                    let pull = ParamVector::mean(peers)?.sub(w_i)?;
                    let mut p = w_i.clone();
                    p.axpy(-spec.dissensus_eps, &pull);
                    p
                };
                out.payloads.insert(i, payload);
            }
        }
    }
    Ok(out)
}

fn gaussian_payload(spec: &AttackSpec, ctx: &AttackContext<'_>, malicious_id: usize, dim: usize) -> ParamVector {
    let mut rng = substream(
        ctx.seed,
        "attack/gaussian",
        &[ctx.round as u64, malicious_id as u64],
    );
    ParamVector::new(normal_vec(&mut rng, dim, 0.0, spec.gaussian_variance.sqrt()))
}

/// `w_i + theta_i * u`, with `u` the unit vector opposing the benign mean
/// update and `theta_i` the largest step that still passes client `i`'s
/// distance test.
pub fn adaptive_payload(ctx: &AttackContext<'_>, target: usize, benign_update: &ParamVector) -> ParamVector {
    let w_i = &ctx.intermediate[target];
    let defense = &ctx.defenses[target];
    let norm_update = benign_update.norm2();
    let direction = if norm_update > 0.0 {
        benign_update.scale(-1.0 / norm_update)
    } else if w_i.norm2() > 0.0 {
        w_i.scale(-1.0 / w_i.norm2())
    } else {
        return w_i.clone();
    };
    let radius = balance_threshold(
        defense.gamma,
        defense.kappa,
        ctx.round,
        ctx.total_rounds,
        w_i.norm2(),
    );
    let mut p = w_i.clone();
    p.axpy(radius * (1.0 - BOUNDARY_SHRINK), &direction);
    p
}

/// The benign client with the most active malicious neighbors (lowest id on
/// ties) and the models it would receive from benign neighbors.
fn krum_reference(ctx: &AttackContext<'_>, benign: &[usize]) -> Option<(usize, usize, Vec<usize>)> {
    benign
        .iter()
        .map(|&i| {
            let (mal, ben): (Vec<usize>, Vec<usize>) = ctx
                .topology
                .neighbors(i)
                .iter()
                .copied()
                .filter(|&j| ctx.active[j])
                .partition(|&j| ctx.topology.is_malicious(j));
            (i, mal.len(), ben)
        })
        .filter(|(_, mal, _)| *mal > 0)
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
}

/// Whether Krum at the reference client picks one of the crafted copies.
pub fn krum_selects_crafted(
    crafted: &ParamVector,
    copies: usize,
    benign_models: &[&ParamVector],
) -> bool {
    let mut pool: Vec<&ParamVector> = benign_models.to_vec();
    pool.extend(std::iter::repeat_n(crafted, copies));
    krum_select(&pool, copies) >= benign_models.len()
}

/// Common vector `mean_benign - theta * sign(mean_update)` with the largest
/// `theta` (found by bisection) that makes Krum at the reference client
/// select it. Returns whether any tested `theta` succeeded.
fn krum_attack_vector(spec: &AttackSpec, ctx: &AttackContext<'_>, benign: &[usize]) -> Result<(ParamVector, bool)> {
    let mean = ctx.benign_mean(benign)?;
    let signs = ParamVector::new(
        ctx.benign_mean_update(benign)?
            .as_slice()
            .iter()
            .map(|v| if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
            .collect(),
    );
    let craft = |theta: f64| {
        let mut v = mean.clone();
        v.axpy(-theta, &signs);
        v
    };
    let Some((_, copies, ref_benign)) = krum_reference(ctx, benign) else {
        return Ok((craft(0.0), false));
    };
    let ref_models: Vec<&ParamVector> = ref_benign.iter().map(|&j| &ctx.intermediate[j]).collect();
    let theta_max = benign
        .iter()
        .flat_map(|&i| ctx.intermediate[i].as_slice().iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
        .max(1e-6);
    let succeeds = |theta: f64| krum_selects_crafted(&craft(theta), copies, &ref_models);
    if succeeds(theta_max) {
        return Ok((craft(theta_max), true));
    }
    let (mut lo, mut hi) = (0.0, theta_max);
    let mut found = false;
    for _ in 0..spec.krum_search_steps {
        let mid = 0.5 * (lo + hi);
        if succeeds(mid) {
            lo = mid;
            found = true;
        } else {
            hi = mid;
        }
    }
    let theta = if found { lo } else { hi };
    Ok((craft(theta), found))
}

/// Per coordinate, push against the benign direction of travel: values
/// just below the benign minimum where the benign update is positive,
/// just above the maximum otherwise.
fn trim_attack_vector(
    spec: &AttackSpec,
    ctx: &AttackContext<'_>,
    benign: &[usize],
    malicious_id: usize,
) -> Result<ParamVector> {
    let update = ctx.benign_mean_update(benign)?;
    let mut rng = substream(ctx.seed, "attack/trim", &[ctx.round as u64, malicious_id as u64]);
    let d = update.len();
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        let (lo, hi) = benign.iter().map(|&i| ctx.intermediate[i][k]).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), v| (lo.min(v), hi.max(v)),
        );
        let u: f64 = rng.random();
        let v = if update[k] > 0.0 {
            lo - u * lo.abs() * spec.trim_spread
        } else {
            hi + u * hi.abs() * spec.trim_spread
        };
        out.push(v);
    }
    Ok(ParamVector::new(out))
}

/// `mu + z_max * sigma` over benign models, with
/// `z_max = Phi^{-1}((n - m - s) / (n - m))`, `s = floor(n/2 + 1) - m`.
fn lie_vector(ctx: &AttackContext<'_>, benign: &[usize]) -> Result<ParamVector> {
    let n = ctx.topology.n();
    let m = ctx.topology.malicious_ids().len();
    let z = lie_z_max(n, m);
    let mean = ctx.benign_mean(benign)?;
    let count = benign.len() as f64;
    let out = (0..mean.len())
        .map(|k| {
            let var = benign
                .iter()
                .map(|&i| (ctx.intermediate[i][k] - mean[k]).powi(2))
                .sum::<f64>()
                / count;
            mean[k] + z * var.sqrt()
        })
        .collect();
    Ok(ParamVector::new(out))
}

/// Quantile multiplier of the "little is enough" attack; the probability is
/// clamped into the open unit interval when `s` falls outside `1..n-m`.
pub fn lie_z_max(n: usize, m: usize) -> f64 {
    let s = ((n / 2 + 1) as i64) - m as i64;
    let honest = (n - m) as f64;
    let p = ((honest - s as f64) / honest).clamp(1e-9, 1.0 - 1e-9);
    inverse_normal_cdf(p)
}

/// Acklam's rational approximation of the standard normal quantile
/// (relative error below 1.2e-9 on (0, 1)).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}
