//! Round engine.
//!
//! A round has two phases separated by a barrier. Step I: every client runs
//! local SGD from its committed model, producing `w^{t+1/2}`. Step II:
//! active benign clients combine what their active neighbors sent, while
//! malicious clients send whatever the attack crafts. Both phases run on a
//! rayon pool against immutable snapshots; results are collected in client
//! id order, so the outcome does not depend on the number of workers.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::aggregation::{
    aggregate, aggregate_self_inclusive, balance_accepts, balance_threshold, trimmed_mean, AggregationContext,
    AggregatorSpec, EvalBatch, Rule,
};
use crate::attacks::{asr, backdoor_augment, craft_models, poison_data, AttackContext, AttackKind, CraftOutcome};
use crate::config::{
    AggregationMode, Assignment, DatasetSpec, ExperimentConfig, GradientReduction, InitMode, PartitionSpec,
    TopologySpec,
};
use crate::data::{
    gen_synthetic_classification, gen_synthetic_regression, normal_vec, partition_iid, partition_noniid_grouped,
    partition_noniid_slices, Dataset,
};
use crate::error::{Result, SimError};
use crate::graph::{
    benign_subgraph_connected, gen_complete, gen_erdos_renyi, gen_regular, gen_ring, gen_small_world,
    isolated_benign, sample_mask, ConnectivityMask, Topology,
};
use crate::model::{ModelSpec, ParamVector};
use crate::rng::{child_seed, substream, SimRng};

/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "DFL_WORKERS";

pub const WARN_DISCONNECTED: &str = "benign subgraph is disconnected";
pub const WARN_ISOLATED: &str = "benign client has no benign neighbor";

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub malicious: bool,
    /// Committed model `w^t`.
    pub model: ParamVector,
    /// Mixing weight used when alpha is fixed per client.
    pub alpha: f64,
    /// Rule used when the aggregator is fixed per client.
    pub aggregator: AggregatorSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Whether the test metrics below were computed this round.
    pub evaluated: bool,
    /// Per benign client (ascending id): test MSE for regression, test
    /// cross-entropy for classification.
    pub test_loss: Vec<f64>,
    /// Per benign client test error rate (classification only).
    pub test_error: Vec<f64>,
    /// Per benign client backdoor success rate (backdoor attack only).
    pub asr: Vec<f64>,
    /// Mean over benign clients of the squared norm of their local training
    /// gradient at the committed model.
    pub grad_norm_sq: Option<f64>,
    /// Per client: received models that entered the combine step, `None`
    /// for clients that did not aggregate.
    pub accepted: Vec<Option<usize>>,
    pub messages: Vec<u64>,
    pub scalars: Vec<u64>,
    pub consensus_error: f64,
    /// Benign clients whose rule kept nothing and fell back to their own model.
    pub fallbacks: Vec<usize>,
    /// Malicious clients whose attack lacked benign statistics.
    pub attack_fallbacks: Vec<usize>,
    /// Adaptive attack: largest `| ||w_i - p|| - radius_i | / ||w_i||` over
    /// the payloads sent this round.
    pub adaptive_gap: Option<f64>,
    /// Adaptive payloads that the target's distance test rejected.
    pub adaptive_rejections: usize,
    /// Update-gossip sub-rounds (LEARN only).
    pub sub_rounds: usize,
    pub ops: u64,
}

/// Initialized experiment: data, graph, and every client's state.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: ExperimentConfig,
    pub topology: Topology,
    pub model: ModelSpec,
    pub test: Dataset,
    /// Training shard per client; malicious shards are already poisoned.
    pub shards: Vec<Dataset>,
    pub clients: Vec<ClientState>,
    pub true_weights: Option<ParamVector>,
    pub warnings: Vec<String>,
    pub benign_ids: Vec<usize>,
    iterations: usize,
    batch_size: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub sim: Simulation,
    pub reports: Vec<RoundReport>,
}

impl ExperimentResult {
    pub fn final_models(&self) -> Vec<ParamVector> {
        self.sim.clients.iter().map(|c| c.model.clone()).collect()
    }

    pub fn benign_models(&self) -> Vec<ParamVector> {
        self.sim
            .benign_ids
            .iter()
            .map(|&i| self.sim.clients[i].model.clone())
            .collect()
    }
}

/// Worker count from [`WORKERS_ENV`], if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Validate, initialize and run all rounds, on a pool sized by
/// [`WORKERS_ENV`] (rayon's default otherwise).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with(config, workers_from_env())
}

pub fn run_experiment_with(config: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult> {
    config.validate()?;
    let go = || -> Result<ExperimentResult> {
        let mut sim = Simulation::new(config.clone())?;
        let reports = sim.run()?;
        Ok(ExperimentResult { sim, reports })
    };
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SimError::param(format!("cannot build worker pool: {e}")))?
            .install(go),
        None => go(),
    }
}

pub fn build_topology(config: &ExperimentConfig) -> Result<Topology> {
    let seed = child_seed(config.seed, "topology", &[]);
    let topo = match &config.topology {
        TopologySpec::Regular { clients, degree } => gen_regular(*clients, *degree, seed)?,
        TopologySpec::Complete { clients } => gen_complete(*clients)?,
        TopologySpec::Ring { clients } => gen_ring(*clients)?,
        TopologySpec::ErdosRenyi { clients, p } => gen_erdos_renyi(*clients, *p, seed)?,
        TopologySpec::SmallWorld { clients, k, p } => gen_small_world(*clients, *k, *p, seed)?,
        TopologySpec::Edges {
            clients,
            edges,
            malicious,
        } => {
            let topo = Topology::from_edges(*clients, edges)?;
            if let Some(ids) = malicious {
                return topo.with_malicious(ids.iter().copied());
            }
            topo
        }
    };
    topo.with_random_malicious(config.malicious_count(), child_seed(config.seed, "roles", &[]))
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let topology = build_topology(&config)?;
        let data_seed = child_seed(config.seed, "data", &[]);
        let (train, test, true_weights) = match &config.dataset {
            DatasetSpec::SyntheticRegression(spec) => {
                let d = gen_synthetic_regression(spec, data_seed)?;
                (d.train, d.test, Some(d.true_weights))
            }
            DatasetSpec::SyntheticClassification(spec) => {
                let (train, test) = gen_synthetic_classification(spec, data_seed)?;
                (train, test, None)
            }
        };
        let n = topology.n();
        let part_seed = child_seed(config.seed, "partition", &[]);
        let plan = match config.partition {
            PartitionSpec::Iid => partition_iid(&train, n, part_seed)?,
            PartitionSpec::Grouped { p } => partition_noniid_grouped(&train, n, p, part_seed)?,
            PartitionSpec::Slices { classes_per_client } => {
                partition_noniid_slices(&train, n, classes_per_client, part_seed)?
            }
        };
        plan.validate(train.len())?;
        let shards = plan.shards.iter().map(|idx| train.subset(idx)).collect();
        Self::from_parts(config, topology, shards, test, true_weights)
    }

    /// Assemble a simulation from an explicit graph and clean shards.
    /// Malicious shards are poisoned here according to the attack.
    pub fn from_parts(
        config: ExperimentConfig,
        topology: Topology,
        mut shards: Vec<Dataset>,
        test: Dataset,
        true_weights: Option<ParamVector>,
    ) -> Result<Self> {
        topology.validate()?;
        let n = topology.n();
        if shards.len() != n {
            return Err(SimError::config(
                "partition",
                format!("{} shards for {n} clients", shards.len()),
            ));
        }
        if let Some(c) = shards.iter().position(|s| s.is_empty()) {
            return Err(SimError::config("partition", format!("client {c} has an empty shard")));
        }
        let model = ModelSpec::for_dataset(&test);
        for &m in &topology.malicious_ids() {
            let kind = config.attack.kind;
            if kind == AttackKind::Backdoor {
                shards[m] = backdoor_augment(&config.attack, &shards[m])?;
            } else if kind.poisons_data() {
                shards[m] = poison_data(&config.attack, &shards[m], child_seed(config.seed, "poison", &[m as u64]))?;
            }
        }

        let d = model.param_dim();
        let clients = (0..n)
            .map(|i| {
                let model_init = match config.init.mode {
                    InitMode::Zeros => ParamVector::zeros(d),
                    InitMode::Random => {
                        let mut rng = substream(config.seed, "init", &[i as u64]);
                        ParamVector::new(normal_vec(&mut rng, d, 0.0, config.init.std))
                    }
                };
                let alpha = match config.alpha.mode {
                    Assignment::Fixed => config.alpha.value,
                    _ => substream(config.seed, "alpha/client", &[i as u64]).random::<f64>(),
                };
                let aggregator = match config.aggregator_choice.mode {
                    Assignment::Fixed => config.aggregator,
                    _ => draw_rule(&config, &mut substream(config.seed, "rule/client", &[i as u64])),
                };
                ClientState {
                    id: i,
                    malicious: topology.is_malicious(i),
                    model: model_init,
                    alpha,
                    aggregator,
                }
            })
            .collect();

        let mut warnings = Vec::new();
        if !benign_subgraph_connected(&topology) {
            warnings.push(WARN_DISCONNECTED.to_string());
        }
        for i in isolated_benign(&topology) {
            warnings.push(format!("{WARN_ISOLATED}: client {i}"));
        }
        for w in &warnings {
            log::warn!("{w}; robustness guarantees do not apply");
        }

        let (iterations, batch_size) = config.local.resolved(config.dataset.is_regression());
        let benign_ids = topology.benign_ids();
        Ok(Self {
            config,
            topology,
            model,
            test,
            shards,
            clients,
            true_weights,
            warnings,
            benign_ids,
            iterations,
            batch_size,
        })
    }

    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        (0..self.config.rounds).map(|t| self.step(t)).collect()
    }

    /// One round, LEARN's multi-exchange variant when LEARN is the fixed rule.
    pub fn step(&mut self, t: usize) -> Result<RoundReport> {
        if self.config.aggregator.rule == Rule::Learn && self.config.aggregator_choice.mode == Assignment::Fixed {
            self.run_learn_round(t)
        } else {
            self.run_round(t)
        }
    }

    fn mask(&self, t: usize) -> Result<ConnectivityMask> {
        if self.config.dropout == 0.0 {
            Ok(ConnectivityMask::all(self.topology.n(), t))
        } else {
            sample_mask(&self.topology, self.config.dropout, t, child_seed(self.config.seed, "dropout", &[]))
        }
    }

    fn round_alpha(&self, i: usize, t: usize) -> f64 {
        match self.config.alpha.mode {
            Assignment::PerRound => substream(self.config.seed, "alpha/round", &[t as u64, i as u64]).random(),
            _ => self.clients[i].alpha,
        }
    }

    fn round_rules(&self, t: usize) -> Vec<AggregatorSpec> {
        (0..self.topology.n())
            .map(|i| match self.config.aggregator_choice.mode {
                Assignment::PerRound => draw_rule(
                    &self.config,
                    &mut substream(self.config.seed, "rule/round", &[t as u64, i as u64]),
                ),
                _ => self.clients[i].aggregator,
            })
            .collect()
    }

    /// Step I for every client, in parallel.
    fn train_all(&self, t: usize) -> Result<(Vec<ParamVector>, u64)> {
        let lr = self.config.learning_rate;
        let out: Vec<(ParamVector, u64)> = (0..self.topology.n())
            .into_par_iter()
            .map(|i| {
                let mut rng = substream(self.config.seed, "batch", &[t as u64, i as u64]);
                local_training(
                    &self.model,
                    &self.clients[i].model,
                    &self.shards[i],
                    lr,
                    self.iterations,
                    self.batch_size,
                    self.config.local.reduction,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let ops = out.iter().map(|(_, o)| o).sum();
        Ok((out.into_iter().map(|(w, _)| w).collect(), ops))
    }

    fn craft_all(
        &self,
        t: usize,
        previous: &[ParamVector],
        half: &[ParamVector],
        mask: &ConnectivityMask,
        rules: &[AggregatorSpec],
    ) -> Result<Vec<Option<CraftOutcome>>> {
        let spec = self.config.attack;
        if !spec.kind.crafts_models() {
            return Ok(vec![None; self.topology.n()]);
        }
        let ctx = AttackContext {
            topology: &self.topology,
            previous,
            intermediate: half,
            active: mask.as_slice(),
            defenses: rules,
            round: t,
            total_rounds: self.config.rounds,
            seed: child_seed(self.config.seed, "attack", &[]),
        };
        (0..self.topology.n())
            .into_par_iter()
            .map(|m| {
                if self.topology.is_malicious(m) && mask.is_active(m) {
                    craft_models(&spec, &ctx, m).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    /// Model client `i` receives from active neighbor `j`.
    fn message<'a>(
        &self,
        j: usize,
        i: usize,
        honest: &'a [ParamVector],
        crafted: &'a [Option<CraftOutcome>],
    ) -> Option<&'a ParamVector> {
        match &crafted[j] {
            Some(out) => out.payloads.get(&i),
            None => Some(&honest[j]),
        }
    }

    fn active_malicious_neighbors(&self, i: usize, mask: &ConnectivityMask) -> usize {
        self.topology
            .neighbors(i)
            .iter()
            .filter(|&&j| mask.is_active(j) && self.topology.is_malicious(j))
            .count()
    }

    /// Train, exchange once, aggregate and commit.
    pub fn run_round(&mut self, t: usize) -> Result<RoundReport> {
        let n = self.topology.n();
        let mask = self.mask(t)?;
        let rules = self.round_rules(t);
        let previous: Vec<ParamVector> = self.clients.iter().map(|c| c.model.clone()).collect();
        let (half, train_ops) = self.train_all(t)?;
        let crafted = self.craft_all(t, &previous, &half, &mask, &rules)?;
        let mut report = self.blank_report(t, &crafted);
        report.ops = train_ops;
        if self.config.attack.kind == AttackKind::Adaptive {
            self.check_adaptive(t, &half, &crafted, &rules, &mut report);
        }

        let outcomes = (0..n)
            .into_par_iter()
            .map(|i| {
                if self.topology.is_malicious(i) || !mask.is_active(i) {
                    return Ok(None);
                }
                let received: Vec<(usize, &ParamVector)> = self
                    .topology
                    .neighbors(i)
                    .iter()
                    .filter(|&&j| mask.is_active(j))
                    .filter_map(|&j| self.message(j, i, &half, &crafted).map(|w| (j, w)))
                    .collect();
                let indices = self.shards[i].all_indices();
                let ctx = AggregationContext {
                    self_id: i,
                    self_model: &half[i],
                    received,
                    round: t,
                    total_rounds: self.config.rounds,
                    alpha: self.round_alpha(i, t),
                    malicious_neighbors: Some(self.active_malicious_neighbors(i, &mask)),
                    eval: Some(EvalBatch {
                        model: &self.model,
                        data: &self.shards[i],
                        indices: &indices,
                    }),
                };
                match self.config.aggregation_mode {
                    AggregationMode::Eq2Mixing => aggregate(&rules[i], &ctx),
                    AggregationMode::SelfInclusive => aggregate_self_inclusive(&rules[i], &ctx),
                }
                .map(Some)
            })
            .collect::<Result<Vec<_>>>()?;

        let d = self.model.param_dim() as u64;
        for (i, (outcome, w_half)) in outcomes.into_iter().zip(half).enumerate() {
            if mask.is_active(i) {
                let sent = self.active_degree(i, &mask) as u64;
                report.messages[i] = sent;
                report.scalars[i] = sent * d;
            }
            self.clients[i].model = match outcome {
                Some(out) => {
                    report.accepted[i] = Some(out.accepted);
                    report.ops += out.ops;
                    if out.fallback {
                        report.fallbacks.push(i);
                    }
                    out.model
                }
                None => w_half,
            };
        }
        self.finish_round(t, &mut report)?;
        Ok(report)
    }

    /// LEARN: `ceil(log2 t)` (1-based `t`) gossip sub-rounds on the local
    /// updates, each replacing a client's working update by the trimmed mean
    /// of its neighbors', then one model exchange combined by trimmed mean
    /// and alpha-mixed.
    pub fn run_learn_round(&mut self, t: usize) -> Result<RoundReport> {
        let n = self.topology.n();
        let mask = self.mask(t)?;
        let rules = self.round_rules(t);
        let previous: Vec<ParamVector> = self.clients.iter().map(|c| c.model.clone()).collect();
        let (half, train_ops) = self.train_all(t)?;
        let crafted = self.craft_all(t, &previous, &half, &mask, &rules)?;
        let mut report = self.blank_report(t, &crafted);
        report.ops = train_ops;
        let sub_rounds = ceil_log2(t + 1);
        report.sub_rounds = sub_rounds;

        let mut work: Vec<ParamVector> = (0..n)
            .map(|i| half[i].sub(&previous[i]))
            .collect::<Result<_>>()?;
        // malicious update messages: crafted model minus own committed model
        let crafted_updates: Vec<Option<Vec<(usize, ParamVector)>>> = crafted
            .iter()
            .enumerate()
            .map(|(m, c)| {
                c.as_ref().map(|out| {
                    out.payloads
                        .iter()
                        .map(|(&i, p)| (i, p.sub(&previous[m]).expect("same dimension")))
                        .collect()
                })
            })
            .collect();
        let d = self.model.param_dim() as u64;
        for _ in 0..sub_rounds {
            let next: Vec<ParamVector> = (0..n)
                .into_par_iter()
                .map(|i| {
                    if self.topology.is_malicious(i) || !mask.is_active(i) {
                        return work[i].clone();
                    }
                    let received: Vec<&ParamVector> = self
                        .topology
                        .neighbors(i)
                        .iter()
                        .filter(|&&j| mask.is_active(j))
                        .filter_map(|&j| match &crafted_updates[j] {
                            Some(list) => list.iter().find(|(to, _)| *to == i).map(|(_, u)| u),
                            None => Some(&work[j]),
                        })
                        .collect();
                    if received.is_empty() {
                        work[i].clone()
                    } else {
                        trimmed_mean(&received, self.active_malicious_neighbors(i, &mask))
                    }
                })
                .collect();
            report.ops += n as u64 * d * self.topology.n() as u64;
            work = next;
        }
        let exchanged: Vec<ParamVector> = (0..n)
            .map(|i| {
                if self.topology.is_malicious(i) {
                    Ok(half[i].clone())
                } else {
                    previous[i].add(&work[i])
                }
            })
            .collect::<Result<_>>()?;

        let outcomes = (0..n)
            .into_par_iter()
            .map(|i| {
                if self.topology.is_malicious(i) || !mask.is_active(i) {
                    return Ok(None);
                }
                let received: Vec<(usize, &ParamVector)> = self
                    .topology
                    .neighbors(i)
                    .iter()
                    .filter(|&&j| mask.is_active(j))
                    .filter_map(|&j| self.message(j, i, &exchanged, &crafted).map(|w| (j, w)))
                    .collect();
                let ctx = AggregationContext {
                    self_id: i,
                    self_model: &exchanged[i],
                    received,
                    round: t,
                    total_rounds: self.config.rounds,
                    alpha: self.round_alpha(i, t),
                    malicious_neighbors: Some(self.active_malicious_neighbors(i, &mask)),
                    eval: None,
                };
                let spec = AggregatorSpec {
                    rule: Rule::Learn,
                    ..rules[i]
                };
                aggregate(&spec, &ctx).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;

        for (i, (outcome, w_half)) in outcomes.into_iter().zip(half).enumerate() {
            if mask.is_active(i) {
                let sent = (sub_rounds as u64 + 1) * self.active_degree(i, &mask) as u64;
                report.messages[i] = sent;
                report.scalars[i] = sent * d;
            }
            self.clients[i].model = match outcome {
                Some(out) => {
                    report.accepted[i] = Some(out.accepted);
                    report.ops += out.ops;
                    if out.fallback {
                        report.fallbacks.push(i);
                    }
                    out.model
                }
                None => w_half,
            };
        }
        self.finish_round(t, &mut report)?;
        Ok(report)
    }

    fn active_degree(&self, i: usize, mask: &ConnectivityMask) -> usize {
        self.topology
            .neighbors(i)
            .iter()
            .filter(|&&j| mask.is_active(j))
            .count()
    }

    fn blank_report(&self, t: usize, crafted: &[Option<CraftOutcome>]) -> RoundReport {
        let n = self.topology.n();
        RoundReport {
            round: t,
            evaluated: false,
            test_loss: Vec::new(),
            test_error: Vec::new(),
            asr: Vec::new(),
            grad_norm_sq: None,
            accepted: vec![None; n],
            messages: vec![0; n],
            scalars: vec![0; n],
            consensus_error: 0.0,
            fallbacks: Vec::new(),
            attack_fallbacks: (0..n)
                .filter(|&m| crafted[m].as_ref().is_some_and(|c| c.fell_back))
                .collect(),
            adaptive_gap: None,
            adaptive_rejections: 0,
            sub_rounds: 0,
            ops: 0,
        }
    }

    /// Feed every adaptive payload back through its target's distance test.
    fn check_adaptive(
        &self,
        t: usize,
        half: &[ParamVector],
        crafted: &[Option<CraftOutcome>],
        rules: &[AggregatorSpec],
        report: &mut RoundReport,
    ) {
        let mut gap: Option<f64> = None;
        for out in crafted.iter().flatten() {
            for (&i, payload) in &out.payloads {
                let w_i = &half[i];
                let norm = w_i.norm2();
                let radius = balance_threshold(rules[i].gamma, rules[i].kappa, t, self.config.rounds, norm);
                let ctx = AggregationContext {
                    self_id: i,
                    self_model: w_i,
                    received: Vec::new(),
                    round: t,
                    total_rounds: self.config.rounds,
                    alpha: 0.5,
                    malicious_neighbors: None,
                    eval: None,
                };
                if !balance_accepts(&rules[i], &ctx, payload) {
                    report.adaptive_rejections += 1;
                }
                let g = if norm > 0.0 {
                    (w_i.distance(payload) - radius).abs() / norm
                } else {
                    0.0
                };
                gap = Some(gap.map_or(g, |x: f64| x.max(g)));
            }
        }
        report.adaptive_gap = gap;
    }

    fn finish_round(&mut self, t: usize, report: &mut RoundReport) -> Result<()> {
        let benign: Vec<&ParamVector> = self.benign_ids.iter().map(|&i| &self.clients[i].model).collect();
        report.consensus_error = crate::metrics::consensus_error(benign.iter().copied())?;
        for &i in &report.fallbacks {
            log::debug!("round {t}: client {i} kept no neighbor model");
        }
        let last = t + 1 == self.config.rounds;
        if last || (t + 1).is_multiple_of(self.config.eval_every) {
            self.evaluate(report)?;
        }
        if let Some(cp) = &self.config.checkpoint {
            if (t + 1).is_multiple_of(cp.every) {
                self.write_checkpoint(&cp.dir, t + 1, t + 1 == cp.every)?;
            }
        }
        Ok(())
    }

    fn evaluate(&self, report: &mut RoundReport) -> Result<()> {
        let regression = self.config.dataset.is_regression();
        let per_client: Vec<(f64, Option<f64>, Option<f64>, f64)> = self
            .benign_ids
            .par_iter()
            .map(|&i| {
                let w = &self.clients[i].model;
                let idx = self.test.all_indices();
                let loss = if regression {
                    self.model.mse(w, &self.test)?
                } else {
                    self.model.loss(w, &self.test, &idx)?
                };
                let err = if regression {
                    None
                } else {
                    Some(self.model.error_rate(w, &self.test)?)
                };
                let a = if self.config.attack.kind == AttackKind::Backdoor {
                    Some(asr(&self.config.attack, &self.model, w, &self.test)?)
                } else {
                    None
                };
                let g = self
                    .model
                    .gradient(w, &self.shards[i], &self.shards[i].all_indices())?
                    .norm2()
                    .powi(2);
                Ok((loss, err, a, g))
            })
            .collect::<Result<_>>()?;
        report.evaluated = true;
        report.test_loss = per_client.iter().map(|c| c.0).collect();
        report.test_error = per_client.iter().filter_map(|c| c.1).collect();
        report.asr = per_client.iter().filter_map(|c| c.2).collect();
        report.grad_norm_sq = Some(per_client.iter().map(|c| c.3).sum::<f64>() / per_client.len() as f64);
        Ok(())
    }

    /// Append `round,w_0,...` to one CSV per client; the first checkpoint
    /// truncates.
    fn write_checkpoint(&self, dir: &Path, round: usize, first: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for c in &self.clients {
            let path = dir.join(format!("client_{:03}.csv", c.id));
            let mut file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!first)
                .truncate(first)
                .open(path)?;
            writeln!(file, "{round},{}", c.model.to_csv_line())?;
        }
        Ok(())
    }
}

fn draw_rule(config: &ExperimentConfig, rng: &mut SimRng) -> AggregatorSpec {
    let pool = &config.aggregator_choice.pool;
    AggregatorSpec {
        rule: pool[rng.random_range(0..pool.len())],
        ..config.aggregator
    }
}

/// `ceil(log2 t)` for `t >= 1`.
pub fn ceil_log2(t: usize) -> usize {
    if t <= 1 {
        0
    } else {
        (usize::BITS - (t - 1).leading_zeros()) as usize
    }
}

/// Local SGD: `iterations` steps of `w <- w - eta * g`, where `g` is the
/// gradient of the loss summed (or averaged, per `reduction`) over a
/// mini-batch drawn without replacement (`None` = full shard). Returns the
/// new model and a rough op count.
#[allow(clippy::too_many_arguments)]
pub fn local_training(
    model: &ModelSpec,
    w: &ParamVector,
    shard: &Dataset,
    lr: f64,
    iterations: usize,
    batch_size: Option<usize>,
    reduction: GradientReduction,
    rng: &mut SimRng,
) -> Result<(ParamVector, u64)> {
    if shard.is_empty() {
        return Err(SimError::config("partition", "empty training shard"));
    }
    let mut w = w.clone();
    let full = shard.all_indices();
    let mut ops = 0;
    for _ in 0..iterations {
        let batch: Vec<usize> = match batch_size {
            Some(b) if b < shard.len() => sample(rng, shard.len(), b).into_vec(),
            _ => full.clone(),
        };
        let g = model.gradient(&w, shard, &batch)?;
        let scale = match reduction {
            GradientReduction::Sum => batch.len() as f64,
            GradientReduction::Mean => 1.0,
        };
        w.axpy(-lr * scale, &g);
        ops += 2 * (batch.len() * model.param_dim()) as u64;
    }
    Ok((w, ops))
}
