//! Experiment configuration: one TOML file per experiment, every field
//! optional with the desk defaults (synthetic regression, 20 clients on a
//! 10-regular graph, 20% malicious, 300 rounds).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{AggregatorSpec, Rule};
use crate::attacks::{AttackKind, AttackSpec};
use crate::data::{ClassificationSpec, RegressionSpec};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    Regular { clients: usize, degree: usize },
    Complete { clients: usize },
    Ring { clients: usize },
    ErdosRenyi { clients: usize, p: f64 },
    SmallWorld { clients: usize, k: usize, p: f64 },
    /// Hand-written graph; `malicious` pins the roles instead of drawing them.
    Edges {
        clients: usize,
        edges: Vec<(usize, usize)>,
        #[serde(default)]
        malicious: Option<Vec<usize>>,
    },
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec::Regular {
            clients: 20,
            degree: 10,
        }
    }
}

impl TopologySpec {
    pub fn clients(&self) -> usize {
        match *self {
            TopologySpec::Regular { clients, .. }
            | TopologySpec::Complete { clients }
            | TopologySpec::Ring { clients }
            | TopologySpec::ErdosRenyi { clients, .. }
            | TopologySpec::SmallWorld { clients, .. }
            | TopologySpec::Edges { clients, .. } => clients,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    SyntheticRegression(RegressionSpec),
    SyntheticClassification(ClassificationSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::SyntheticRegression(RegressionSpec::default())
    }
}

impl DatasetSpec {
    pub fn is_regression(&self) -> bool {
        matches!(self, DatasetSpec::SyntheticRegression(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    #[default]
    Iid,
    /// Label skew with degree `p` over label groups.
    Grouped { p: f64 },
    /// Every client holds `classes_per_client` labels.
    Slices { classes_per_client: usize },
}

/// How a per-client quantity is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Same configured value everywhere.
    #[default]
    Fixed,
    /// Drawn once per client.
    PerClient,
    /// Redrawn for every client every round.
    PerRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSpec {
    /// Random modes draw alpha from U[0, 1] and ignore `value`.
    pub mode: Assignment,
    pub value: f64,
}

impl Default for AlphaSpec {
    fn default() -> Self {
        Self {
            mode: Assignment::Fixed,
            value: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorChoice {
    /// Random modes draw each benign client's rule uniformly from `pool`.
    pub mode: Assignment,
    pub pool: Vec<Rule>,
}

impl Default for AggregatorChoice {
    fn default() -> Self {
        Self {
            mode: Assignment::Fixed,
            pool: Rule::ROBUST_BASELINES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `alpha * own + (1 - alpha) * AGG(received)`.
    #[default]
    Eq2Mixing,
    /// `AGG(received + own)`, no alpha.
    SelfInclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientReduction {
    /// Step along the gradient of the loss summed over the batch.
    #[default]
    Sum,
    /// Step along the gradient of the batch-mean loss.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalSpec {
    /// SGD steps per round; default 1 (regression) or 5 (classification).
    pub iterations: Option<usize>,
    /// Mini-batch size; default full batch (regression) or 32.
    pub batch_size: Option<usize>,
    pub reduction: GradientReduction,
}

impl LocalSpec {
    pub fn resolved(&self, regression: bool) -> (usize, Option<usize>) {
        if regression {
            (self.iterations.unwrap_or(1), self.batch_size)
        } else {
            (self.iterations.unwrap_or(5), Some(self.batch_size.unwrap_or(32)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// All clients start from the zero vector.
    #[default]
    Zeros,
    /// Each client draws its own start from N(0, std^2).
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSpec {
    pub mode: InitMode,
    pub std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            mode: InitMode::Zeros,
            std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSpec {
    pub every: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub learning_rate: f64,
    pub malicious_fraction: f64,
    /// Per-round, per-client dropout probability.
    pub dropout: f64,
    /// Test metrics are computed every `eval_every` rounds and after the last.
    pub eval_every: usize,
    pub aggregation_mode: AggregationMode,
    pub topology: TopologySpec,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub local: LocalSpec,
    pub init: InitSpec,
    pub alpha: AlphaSpec,
    pub aggregator: AggregatorSpec,
    pub aggregator_choice: AggregatorChoice,
    pub attack: AttackSpec,
    pub checkpoint: Option<CheckpointSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 300,
            learning_rate: 6e-4,
            malicious_fraction: 0.2,
            dropout: 0.0,
            eval_every: 1,
            aggregation_mode: AggregationMode::Eq2Mixing,
            topology: TopologySpec::default(),
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::Iid,
            local: LocalSpec::default(),
            init: InitSpec::default(),
            alpha: AlphaSpec::default(),
            aggregator: AggregatorSpec::default(),
            aggregator_choice: AggregatorChoice::default(),
            attack: AttackSpec::default(),
            checkpoint: None,
        }
    }
}

fn check(ok: bool, path: &str, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(SimError::config(path, msg))
    }
}

/// Section-level error; "<field> must ..." messages get the field appended
/// to the path.
fn nested(path: &str, err: SimError) -> SimError {
    match err {
        SimError::Param(msg) => match msg.split_once(' ') {
            Some((field, rest))
                if rest.starts_with("must") && field.chars().all(|c| c.is_ascii_lowercase() || c == '_') =>
            {
                SimError::config(format!("{path}.{field}"), msg)
            }
            _ => SimError::config(path, msg),
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Default config with the given rule and attack.
    pub fn desk(rule: Rule, attack: AttackKind, seed: u64) -> Self {
        Self {
            seed,
            aggregator: AggregatorSpec::new(rule),
            attack: AttackSpec::new(attack),
            ..Default::default()
        }
    }

    pub fn clients(&self) -> usize {
        self.topology.clients()
    }

    pub fn malicious_count(&self) -> usize {
        match &self.topology {
            TopologySpec::Edges {
                malicious: Some(ids), ..
            } => ids.len(),
            _ => (self.malicious_fraction * self.clients() as f64).round() as usize,
        }
    }

    /// Field-level checks; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        check(self.rounds >= 1, "rounds", "must be >= 1")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be > 0",
        )?;
        check(
            (0.0..1.0).contains(&self.malicious_fraction),
            "malicious_fraction",
            "must be in [0, 1)",
        )?;
        check((0.0..=1.0).contains(&self.dropout), "dropout", "must be in [0, 1]")?;
        check(self.eval_every >= 1, "eval_every", "must be >= 1")?;
        check(self.clients() >= 1, "topology.clients", "must be >= 1")?;
        check(
            self.malicious_count() < self.clients(),
            "malicious_fraction",
            "leaves no benign client",
        )?;
        check(
            (0.0..=1.0).contains(&self.alpha.value),
            "alpha.value",
            "must be in [0, 1]",
        )?;
        check(
            self.local.iterations != Some(0),
            "local.iterations",
            "must be >= 1",
        )?;
        check(
            self.local.batch_size != Some(0),
            "local.batch_size",
            "must be >= 1",
        )?;
        check(self.init.std >= 0.0, "init.std", "must be >= 0")?;
        if let Some(cp) = &self.checkpoint {
            check(cp.every >= 1, "checkpoint.every", "must be >= 1")?;
        }
        check(
            self.aggregator_choice.mode == Assignment::Fixed || !self.aggregator_choice.pool.is_empty(),
            "aggregator_choice.pool",
            "must not be empty",
        )?;
        self.aggregator.validate().map_err(|e| nested("aggregator", e))?;
        self.attack.validate().map_err(|e| nested("attack", e))?;
        let regression = self.dataset.is_regression();
        check(
            !(regression && self.attack.kind == AttackKind::Backdoor),
            "attack.kind",
            "backdoor needs a classification dataset",
        )?;
        check(
            regression || self.attack.trigger_feature < self.input_dim(),
            "attack.trigger_feature",
            "outside the feature range",
        )?;
        check(
            !(regression && self.partition != PartitionSpec::Iid),
            "partition.kind",
            "label-skew partitions need a classification dataset",
        )?;
        if let PartitionSpec::Grouped { p } = self.partition {
            check((0.0..=1.0).contains(&p), "partition.p", "must be in [0, 1]")?;
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetSpec::SyntheticRegression(s) => s.dim,
            DatasetSpec::SyntheticClassification(s) => s.dim,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Stable short hash of the canonical serialization, excluding the seed.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.seed = 0;
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        hex::encode(&digest[..6])
    }
}

/// Parse and validate a TOML config.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let path = e
            .span()
            .map(|s| locate_key(text, s.start))
            .unwrap_or_default();
        SimError::config(path, msg)
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

/// Dotted key path of the line holding byte `offset`, from the nearest
/// preceding `[section]` header and the key on that line.
fn locate_key(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && !trimmed.starts_with("[[") {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len() + 1;
        if pos > offset {
            break;
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.attack.kind, AttackKind::None);
        assert_eq!(c.aggregator.gamma, 0.3);
        assert_eq!(c.aggregator.kappa, 1.0);
        assert_eq!(c.alpha.value, 0.5);
        assert_eq!(c.rounds, 300);
        assert_eq!(c.learning_rate, 6e-4);
        assert_eq!(c.clients(), 20);
        assert_eq!(c.malicious_count(), 4);
    }

    #[test]
    fn empty_attack_section_means_no_attack() {
        let c = parse_config_str("[attack]\n").unwrap();
        assert_eq!(c.attack.kind, AttackKind::None);
    }

    #[test]
    fn malicious_fraction_one_is_rejected() {
        let err = parse_config_str("malicious_fraction = 1.0\n").unwrap_err();
        assert!(matches!(err, SimError::Config { ref path, .. } if path == "malicious_fraction"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.aggregator.gamma = 0.3;
        c.aggregator.kappa = 1.0;
        c.attack = AttackSpec::new(AttackKind::Adaptive);
        c.topology = TopologySpec::Edges {
            clients: 3,
            edges: vec![(0, 1), (1, 2)],
            malicious: Some(vec![0]),
        };
        c.dataset = DatasetSpec::SyntheticClassification(ClassificationSpec::default());
        c.partition = PartitionSpec::Grouped { p: 0.5 };
        c.checkpoint = Some(CheckpointSpec {
            every: 10,
            dir: "ckpt".into(),
        });
        let text = c.to_toml();
        assert_eq!(parse_config_str(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_type_errors_name_the_field() {
        let err = parse_config_str("[aggregator]\nrule = \"balance\"\ngama = 0.3\n").unwrap_err();
        match err {
            SimError::Config { path, msg } => {
                assert!(path.starts_with("aggregator"), "{path}");
                assert!(msg.contains("gama"), "{msg}");
            }
            other => panic!("{other}"),
        }
        let err = parse_config_str("rounds = \"many\"\n").unwrap_err();
        assert!(matches!(err, SimError::Config { ref path, .. } if path == "rounds"), "{err}");
    }

    #[test]
    fn constraint_errors_name_the_field() {
        for (text, field) in [
            ("rounds = 0\n", "rounds"),
            ("learning_rate = -1.0\n", "learning_rate"),
            ("[alpha]\nvalue = 1.5\n", "alpha.value"),
            ("[attack]\nkind = \"backdoor\"\n", "attack.kind"),
            ("[aggregator]\ngamma = 0.0\n", "aggregator.gamma"),
            ("[aggregator]\nassumed_fraction = 1.0\n", "aggregator.assumed_fraction"),
            ("[attack]\nbackdoor_scale = -1.0\n", "attack.backdoor_scale"),
        ] {
            match parse_config_str(text).unwrap_err() {
                SimError::Config { path, .. } => assert_eq!(path, field, "{text}"),
                other => panic!("{other}"),
            }
        }
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
seed = 3
[topology]
kind = "small_world"
clients = 12
k = 4
p = 0.1
[dataset]
kind = "synthetic_classification"
classes = 4
dim = 8
[partition]
kind = "slices"
classes_per_client = 2
[aggregator]
rule = "trim_mean"
[alpha]
mode = "per_round"
"#;
        let c = parse_config_str(text).unwrap();
        assert_eq!(c.clients(), 12);
        assert_eq!(c.aggregator.rule, Rule::TrimMean);
        assert_eq!(c.alpha.mode, Assignment::PerRound);
        match c.dataset {
            DatasetSpec::SyntheticClassification(s) => assert_eq!((s.classes, s.dim), (4, 8)),
            _ => panic!(),
        }
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = ExperimentConfig::desk(Rule::Balance, AttackKind::None, 1);
        let b = ExperimentConfig::desk(Rule::Balance, AttackKind::None, 2);
        let c = ExperimentConfig::desk(Rule::Krum, AttackKind::None, 1);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
