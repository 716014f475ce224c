//! Grid execution, CSV persistence and table rendering behind the `dfl`
//! binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;
use toml::{Table, Value};

use crate::aggregation::Rule;
use crate::attacks::AttackKind;
use crate::config::ExperimentConfig;
use crate::error::{Result, SimError};
use crate::metrics::{summarize, MetricRecord};
use crate::protocol::{run_experiment_with, RoundReport};

/// Frozen column list of experiment CSVs.
pub const CSV_HEADER: &str =
    "config_hash,config,seed,rule,attack,status,max_mse,max_ter,max_asr,consensus_error,messages,scalars,runtime_ops";

/// Seed column value of the per-config aggregate row.
pub const AGGREGATE_SEED: &str = "mean";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUN_FAILURES: i32 = 2;

/// A named experiment; the name is the file stem plus any sweep overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedConfig {
    pub name: String,
    pub config: ExperimentConfig,
}

/// Load one config file, or every `*.toml` file of a directory (sorted by
/// name). A top-level `[sweep]` table maps dotted keys to value lists and
/// expands the file into the cartesian product of those overrides.
pub fn load_configs(path: &Path) -> Result<Vec<NamedConfig>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(load_file(&f)?);
        }
        Ok(out)
    } else {
        load_file(path)
    }
}

fn load_file(path: &Path) -> Result<Vec<NamedConfig>> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    expand_sweep(&stem, &std::fs::read_to_string(path)?)
}

/// Expand the text of one config file (see [`load_configs`]).
pub fn expand_sweep(stem: &str, text: &str) -> Result<Vec<NamedConfig>> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| SimError::config("", e.message().to_string()))?;
    let Some(sweep) = table.remove("sweep") else {
        return Ok(vec![NamedConfig {
            name: stem.to_string(),
            config: crate::config::parse_config_str(text)?,
        }]);
    };
    let Value::Table(sweep) = sweep else {
        return Err(SimError::config("sweep", "must be a table of value lists"));
    };
    let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
    for (key, values) in sweep {
        match values {
            Value::Array(list) if !list.is_empty() => axes.push((key, list)),
            _ => return Err(SimError::config(format!("sweep.{key}"), "must be a non-empty list")),
        }
    }
    let mut out = Vec::new();
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    for combo in 0..total {
        let mut t = table.clone();
        let mut rest = combo;
        let mut labels = Vec::new();
        // last axis varies fastest
        let mut picks = vec![0; axes.len()];
        for (a, (_, values)) in axes.iter().enumerate().rev() {
            picks[a] = rest % values.len();
            rest /= values.len();
        }
        for ((key, values), &p) in axes.iter().zip(&picks) {
            set_dotted(&mut t, key, values[p].clone())?;
            labels.push(format!("{key}={}", display_value(&values[p])));
        }
        let text = toml::to_string(&t).map_err(|e| SimError::config("sweep", e.to_string()))?;
        let config = crate::config::parse_config_str(&text)?;
        out.push(NamedConfig {
            name: format!("{stem}[{}]", labels.join(",")),
            config,
        });
    }
    Ok(out)
}

fn display_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        SimError::config(format!("sweep.{key}"), "empty key")
    })?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| SimError::config(format!("sweep.{key}"), format!("{p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub config_hash: String,
    pub config: String,
    /// `None` marks the aggregate row.
    pub seed: Option<u64>,
    pub rule: Rule,
    pub attack: AttackKind,
    pub ok: bool,
    pub max_mse: Option<f64>,
    pub max_ter: Option<f64>,
    pub max_asr: Option<f64>,
    pub consensus_error: Option<f64>,
    pub messages: Option<f64>,
    pub scalars: Option<f64>,
    pub runtime_ops: Option<f64>,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl GridRow {
    fn record(&self) -> [String; 13] {
        [
            self.config_hash.clone(),
            self.config.clone(),
            self.seed.map_or(AGGREGATE_SEED.to_string(), |s| s.to_string()),
            self.rule.name().to_string(),
            self.attack.name().to_string(),
            if self.ok { "ok" } else { "failed" }.to_string(),
            field(self.max_mse),
            field(self.max_ter),
            field(self.max_asr),
            field(self.consensus_error),
            field(self.messages),
            field(self.scalars),
            field(self.runtime_ops),
        ]
    }

    /// Row of one finished (or failed) run.
    pub fn from_result(named: &NamedConfig, seed: u64, record: &Result<MetricRecord>) -> Self {
        let c = &named.config;
        let mut row = GridRow {
            config_hash: c.hash(),
            config: named.name.clone(),
            seed: Some(seed),
            rule: c.aggregator.rule,
            attack: c.attack.kind,
            ok: false,
            max_mse: None,
            max_ter: None,
            max_asr: None,
            consensus_error: None,
            messages: None,
            scalars: None,
            runtime_ops: None,
        };
        if let Ok(m) = record {
            row.ok = true;
            row.max_mse = m.max_mse;
            row.max_ter = m.max_ter;
            row.max_asr = m.max_asr;
            row.consensus_error = Some(m.consensus_error);
            row.messages = Some(m.messages as f64);
            row.scalars = Some(m.scalars as f64);
            row.runtime_ops = Some(m.ops as f64);
        }
        row
    }
}

/// Header plus one line per row.
pub fn rows_to_csv(rows: &[GridRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
    for r in rows {
        w.write_record(r.record()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn mean_of(rows: &[&GridRow], get: impl Fn(&GridRow) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| get(r)).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Mean over the successful seeds; failed when none succeeded.
pub fn aggregate_row(rows: &[GridRow]) -> Option<GridRow> {
    let first = rows.first()?;
    let ok: Vec<&GridRow> = rows.iter().filter(|r| r.ok).collect();
    Some(GridRow {
        seed: None,
        ok: !ok.is_empty(),
        max_mse: mean_of(&ok, |r| r.max_mse),
        max_ter: mean_of(&ok, |r| r.max_ter),
        max_asr: mean_of(&ok, |r| r.max_asr),
        consensus_error: mean_of(&ok, |r| r.consensus_error),
        messages: mean_of(&ok, |r| r.messages),
        scalars: mean_of(&ok, |r| r.scalars),
        runtime_ops: mean_of(&ok, |r| r.runtime_ops),
        ..first.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub failures: usize,
}

impl GridOutcome {
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn exit_code(&self) -> i32 {
        if self.failures > 0 {
            EXIT_RUN_FAILURES
        } else {
            EXIT_OK
        }
    }
}

/// Seeds used for a config: `seed, seed + 1, ..., seed + count - 1`.
pub fn seed_list(config: &ExperimentConfig, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| config.seed.wrapping_add(k)).collect()
}

/// Run every (config, seed) pair; per-config rows in seed order followed by
/// the aggregate row. Failed runs are marked and do not stop the grid.
pub fn run_grid(configs: &[NamedConfig], seeds: usize, workers: Option<usize>) -> GridOutcome {
    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(c, named)| seed_list(&named.config, seeds).into_iter().map(move |s| (c, s)))
        .collect();
    let run = || -> Vec<GridRow> {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let named = &configs[c];
                let config = ExperimentConfig {
                    seed,
                    ..named.config.clone()
                };
                let started = std::time::Instant::now();
                let record = run_experiment_with(&config, None).and_then(|r| summarize(&r));
                match &record {
                    Ok(_) => log::info!("{} seed {seed}: done in {:.2?}", named.name, started.elapsed()),
                    Err(e) => log::error!("{} seed {seed}: {e}", named.name),
                }
                GridRow::from_result(named, seed, &record)
            })
            .collect()
    };
    let per_seed = match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        },
        None => run(),
    };
    let failures = per_seed.iter().filter(|r| !r.ok).count();
    let mut rows = Vec::with_capacity(per_seed.len() + configs.len());
    for chunk in per_seed.chunks(seeds.max(1)) {
        rows.extend_from_slice(chunk);
        if let Some(agg) = aggregate_row(chunk) {
            rows.push(agg);
        }
    }
    GridOutcome { rows, failures }
}

/// Column list of the per-round trace written by `dfl run --rounds-csv`.
pub const ROUNDS_HEADER: &str =
    "round,evaluated,max_test_loss,mean_test_loss,max_test_error,consensus_error,messages,fallbacks";

/// One line per round: worst and mean benign test loss (empty when the
/// round was not evaluated), consensus error, messages sent, fallbacks.
pub fn rounds_to_csv(reports: &[RoundReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ROUNDS_HEADER.split(',')).expect("in-memory write");
    for r in reports {
        let (max, mean) = if r.test_loss.is_empty() {
            (None, None)
        } else {
            let max = r.test_loss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (Some(max), Some(r.test_loss.iter().sum::<f64>() / r.test_loss.len() as f64))
        };
        let max_err = r.test_error.iter().copied().reduce(f64::max);
        w.write_record([
            r.round.to_string(),
            r.evaluated.to_string(),
            field(max),
            field(mean),
            field(max_err),
            r.consensus_error.to_string(),
            r.messages.iter().sum::<u64>().to_string(),
            r.fallbacks.len().to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("numbers are ascii")
}

/// Rows of a CSV previously written by [`GridOutcome::to_csv`], keyed by
/// column name.
pub fn parse_csv(text: &str) -> Result<Vec<BTreeMap<String, String>>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let cols: Vec<String> = reader
        .headers()
        .map_err(|e| SimError::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| SimError::Parse(e.to_string()))?;
            Ok(cols.iter().cloned().zip(rec.iter().map(str::to_string)).collect())
        })
        .collect()
}

/// Which cells a rendered table shows.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    /// CSV column holding the cell value, e.g. `max_mse`.
    pub metric: String,
    pub rules: Vec<Rule>,
    pub attacks: Vec<AttackKind>,
    #[serde(default)]
    pub title: Option<String>,
}

impl TableSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::config("table", e.message().to_string()))
    }
}

/// `>100` above 100, otherwise two decimals.
pub fn format_cell(v: f64) -> String {
    if v > 100.0 || v.is_nan() {
        ">100".to_string()
    } else {
        format!("{v:.2}")
    }
}

/// Rules as rows, attacks as columns, taken from aggregate rows; missing
/// cells render as an em dash. When several aggregate rows share a cell the
/// first one wins.
pub fn emit_table(csv: &str, spec: &TableSpec) -> Result<String> {
    let rows = parse_csv(csv)?;
    let mut cells: BTreeMap<(String, String), String> = BTreeMap::new();
    for r in &rows {
        if r.get("seed").map(String::as_str) != Some(AGGREGATE_SEED) {
            continue;
        }
        let (Some(rule), Some(attack)) = (r.get("rule"), r.get("attack")) else {
            continue;
        };
        let Some(raw) = r.get(&spec.metric).filter(|v| !v.is_empty()) else {
            continue;
        };
        let value: f64 = raw
            .parse()
            .map_err(|_| SimError::Parse(format!("{}: not a number: {raw}", spec.metric)))?;
        cells
            .entry((rule.clone(), attack.clone()))
            .or_insert_with(|| format_cell(value));
    }
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec![String::new()];
    header.extend(spec.attacks.iter().map(|a| a.display_name().to_string()));
    grid.push(header);
    for rule in &spec.rules {
        let mut line = vec![rule.display_name().to_string()];
        for attack in &spec.attacks {
            line.push(
                cells
                    .get(&(rule.name().to_string(), attack.name().to_string()))
                    .cloned()
                    .unwrap_or_else(|| "\u{2014}".to_string()),
            );
        }
        grid.push(line);
    }
    let ncols = grid[0].len();
    let widths: Vec<usize> = (0..ncols)
        .map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    if let Some(title) = &spec.title {
        writeln!(out, "{title}").unwrap();
    }
    for (k, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let pad = widths[c] - v.chars().count();
                if c == 0 {
                    format!("{v}{}", " ".repeat(pad))
                } else {
                    format!("{}{v}", " ".repeat(pad))
                }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        if k == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (ncols - 1);
            writeln!(out, "{}", "-".repeat(total)).unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rule: Rule, seed: u64) -> NamedConfig {
        let mut config = ExperimentConfig::desk(rule, AttackKind::None, seed);
        config.rounds = 3;
        config.topology = crate::config::TopologySpec::Regular { clients: 6, degree: 2 };
        config.dataset = crate::config::DatasetSpec::SyntheticRegression(crate::data::RegressionSpec {
            examples: 200,
            dim: 5,
            ..Default::default()
        });
        NamedConfig {
            name: format!("tiny-{}", rule.name()),
            config,
        }
    }

    #[test]
    fn one_config_ten_seeds_gives_eleven_rows() {
        let out = run_grid(&[tiny(Rule::Balance, 0)], 10, Some(2));
        assert_eq!(out.rows.len(), 11);
        assert_eq!(out.failures, 0);
        assert_eq!(out.exit_code(), EXIT_OK);
        assert!(out.rows[..10].iter().all(|r| r.seed.is_some()));
        assert_eq!(out.rows[10].seed, None);
        let hashes: Vec<&str> = out.rows.iter().map(|r| r.config_hash.as_str()).collect();
        assert!(hashes.iter().all(|h| *h == hashes[0]));
        assert_ne!(out.rows[0].max_mse, out.rows[1].max_mse);
        let mean = out.rows[..10].iter().map(|r| r.max_mse.unwrap()).sum::<f64>() / 10.0;
        assert!((out.rows[10].max_mse.unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn grid_csv_is_reproducible_and_ordered() {
        let configs = [tiny(Rule::Median, 3), tiny(Rule::Fedavg, 3)];
        let a = run_grid(&configs, 2, Some(1)).to_csv();
        let b = run_grid(&configs, 2, Some(3)).to_csv();
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[1].contains(",median,") && lines[1].contains(",3,"));
        assert!(lines[3].contains(",mean,"));
        assert!(lines[4].contains(",fedavg,"));
    }

    #[test]
    fn failed_runs_are_marked() {
        let mut bad = tiny(Rule::Balance, 0);
        // more clients than a 2-regular graph on 6 nodes allows to split 1 example
        bad.config.dataset = crate::config::DatasetSpec::SyntheticRegression(crate::data::RegressionSpec {
            examples: 5,
            dim: 2,
            ..Default::default()
        });
        let out = run_grid(&[bad], 2, None);
        assert_eq!(out.failures, 2);
        assert_eq!(out.exit_code(), EXIT_RUN_FAILURES);
        assert!(out.rows.iter().all(|r| !r.ok));
        assert!(out.to_csv().lines().nth(1).unwrap().contains(",failed,,,"));
    }

    #[test]
    fn sweep_expands_cartesian_product() {
        let text = r#"
rounds = 5
[sweep]
"aggregator.rule" = ["fedavg", "krum", "balance"]
"attack.kind" = ["none", "gaussian"]
"#;
        let configs = expand_sweep("t10", text).unwrap();
        assert_eq!(configs.len(), 6);
        assert_eq!(configs[0].name, "t10[aggregator.rule=fedavg,attack.kind=none]");
        assert_eq!(configs[1].config.attack.kind, AttackKind::Gaussian);
        assert_eq!(configs[5].config.aggregator.rule, Rule::Balance);
        assert!(configs.iter().all(|c| c.config.rounds == 5));
        assert!(expand_sweep("x", "[sweep]\nrounds = []\n").is_err());
        assert!(expand_sweep("x", "[sweep]\n\"attack.kind\" = [\"nope\"]\n").is_err());
    }

    #[test]
    fn table_formatting() {
        let spec = TableSpec {
            metric: "max_mse".into(),
            rules: vec![Rule::Fedavg, Rule::Balance],
            attacks: vec![AttackKind::None, AttackKind::Gaussian],
            title: None,
        };
        let header_only = emit_table("", &spec).unwrap();
        assert_eq!(header_only.lines().count(), 4);
        assert!(header_only.contains('\u{2014}'));

        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for (rule, attack, v) in [
            ("fedavg", "none", "0.3612"),
            ("fedavg", "gaussian", "613.9"),
            ("balance", "none", "0.358"),
        ] {
            csv.push_str(&format!("h,c,mean,{rule},{attack},ok,{v},,,0,1,1,1\n"));
        }
        // per-seed rows are ignored
        csv.push_str("h,c,0,balance,gaussian,ok,9,,,0,1,1,1\n");
        let table = emit_table(&csv, &spec).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("No") && lines[0].contains("Gauss"));
        assert!(lines[2].starts_with("FedAvg") && lines[2].contains("0.36") && lines[2].contains(">100"));
        assert!(lines[3].starts_with("BALANCE") && lines[3].contains("0.36") && lines[3].ends_with('\u{2014}'));
    }

    #[test]
    fn csv_round_trips_sweep_names() {
        let mut row = run_grid(&[tiny(Rule::Fedavg, 0)], 1, None).rows.remove(0);
        row.config = "t[a=1,b=\"x\"]".into();
        let parsed = parse_csv(&rows_to_csv(&[row.clone()])).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0]["config"], row.config);
        assert_eq!(parsed[0]["max_mse"], row.max_mse.unwrap().to_string());
    }

    #[test]
    fn table_spec_parses() {
        let spec = TableSpec::parse(
            "metric = \"max_mse\"\nrules = [\"fedavg\", \"trim_mean\"]\nattacks = [\"none\", \"lf\"]\n",
        )
        .unwrap();
        assert_eq!(spec.rules, vec![Rule::Fedavg, Rule::TrimMean]);
        assert_eq!(spec.attacks, vec![AttackKind::None, AttackKind::LabelFlip]);
    }
}
