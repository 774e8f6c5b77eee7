//! Accuracy, fidelity and rule-set size, the multi-seed experiment protocol,
//! and a checker for the arithmetic behind the published result tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::binarization::{binarize_dataset, binarize_images};
use crate::dataset::{DatasetSplit, LabeledImage, Raster};
use crate::inference::{FactSet, Interpreter};
use crate::rules::{fold_sem_with, ruleset_size, FoldConfig, RuleSet};
use crate::sparsity::ThresholdTensor;
use crate::training::{build_schedule, run_strategy, Strategy, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// Percentage of predictions equal to their label; `None` (abstain) is wrong.
pub fn accuracy<T: PartialEq>(predictions: &[Option<T>], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "accuracy",
            expected: labels.len().to_string(),
            actual: predictions.len().to_string(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty prediction set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p.as_ref() == Some(*l)).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Percentage of NeSy predictions matching the CNN; an abstention never matches.
pub fn fidelity<T: PartialEq>(nesy: &[Option<T>], cnn: &[T]) -> Result<f64> {
    if nesy.len() != cnn.len() {
        return Err(Error::ShapeMismatch {
            context: "fidelity",
            expected: cnn.len().to_string(),
            actual: nesy.len().to_string(),
        });
    }
    if cnn.is_empty() {
        return Err(Error::InvalidArgument("fidelity of an empty prediction set".into()));
    }
    let hits = nesy.iter().zip(cnn).filter(|(p, c)| p.as_ref() == Some(*c)).count();
    Ok(100.0 * hits as f64 / cnn.len() as f64)
}

/// Round half up, used only when a report is emitted.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cnn_accuracy: f64,
    pub nesy_accuracy: f64,
    pub fidelity: f64,
    pub ruleset_size: f64,
    pub abstention_rate: f64,
}

impl Metrics {
    fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Option<Metrics> {
        let v: Vec<&Metrics> = items.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| v.iter().map(|m| f(m)).sum::<f64>() / n;
        Some(Metrics {
            cnn_accuracy: avg(|m| m.cnn_accuracy),
            nesy_accuracy: avg(|m| m.nesy_accuracy),
            fidelity: avg(|m| m.fidelity),
            ruleset_size: avg(|m| m.ruleset_size),
            abstention_rate: avg(|m| m.abstention_rate),
        })
    }

    pub fn rounded(&self) -> RoundedMetrics {
        RoundedMetrics {
            cnn_accuracy: round_half_up(self.cnn_accuracy),
            nesy_accuracy: round_half_up(self.nesy_accuracy),
            fidelity: round_half_up(self.fidelity),
            ruleset_size: round_half_up(self.ruleset_size),
            abstention_rate: round_half_up(self.abstention_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundedMetrics {
    pub cnn_accuracy: i64,
    pub nesy_accuracy: i64,
    pub fidelity: i64,
    pub ruleset_size: i64,
    pub abstention_rate: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: Strategy,
    pub dataset: String,
    pub seed: u64,
    /// Percentages on the test split.
    pub cnn_accuracy: f64,
    pub nesy_accuracy: f64,
    pub fidelity: f64,
    pub ruleset_size: usize,
    pub abstention_rate: f64,
}

impl RunResult {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            cnn_accuracy: self.cnn_accuracy,
            nesy_accuracy: self.nesy_accuracy,
            fidelity: self.fidelity,
            ruleset_size: self.ruleset_size as f64,
            abstention_rate: self.abstention_rate,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Test-split predictions of the CNN and of the NeSy model, as class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub cnn: Vec<usize>,
    pub nesy: Vec<Option<usize>>,
}

pub fn predict(
    model: &BackboneModel,
    thresholds: Option<&ThresholdTensor>,
    rules: &RuleSet,
    images: &[LabeledImage],
    class_names: &[String],
) -> Result<Predictions> {
    let table = binarize_images(model, images, thresholds, class_names)?;
    let by_id: BTreeMap<&str, &LabeledImage> = images.iter().map(|im| (im.id.as_str(), im)).collect();
    let rasters: Vec<&Raster> = table.rows.iter().map(|r| &by_id[r.id.as_str()].pixels).collect();
    let cnn = model.predict(&rasters)?;
    let interp = Interpreter::new(rules)?;
    let nesy = table
        .rows
        .iter()
        .map(|r| {
            interp
                .classify(&FactSet::from_row(r))
                .and_then(|c| class_names.iter().position(|n| n == c))
        })
        .collect();
    Ok(Predictions {
        ids: table.rows.iter().map(|r| r.id.clone()).collect(),
        labels: table.labels(),
        cnn,
        nesy,
    })
}

pub fn evaluate(
    model: &BackboneModel,
    thresholds: Option<&ThresholdTensor>,
    rules: &RuleSet,
    images: &[LabeledImage],
    class_names: &[String],
) -> Result<Metrics> {
    let p = predict(model, thresholds, rules, images, class_names)?;
    let cnn: Vec<Option<usize>> = p.cnn.iter().map(|&c| Some(c)).collect();
    Ok(Metrics {
        cnn_accuracy: accuracy(&cnn, &p.labels)?,
        nesy_accuracy: accuracy(&p.nesy, &p.labels)?,
        fidelity: fidelity(&p.nesy, &p.cnn)?,
        ruleset_size: ruleset_size(rules) as f64,
        abstention_rate: 100.0 * p.nesy.iter().filter(|x| x.is_none()).count() as f64 / p.nesy.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub fold: FoldConfig,
}

/// Everything one seed of one strategy produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub outcome: TrainOutcome,
    pub rules: RuleSet,
    pub result: RunResult,
}

/// Train, extract and evaluate once. `seed` drives initialization, batch
/// order and the random P matrix.
pub fn run_once(strategy: Strategy, name: &str, dataset: &DatasetSplit, seed: u64, cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let mut train = cfg.train.clone();
    train.seed = seed;
    train.sparsity.seed = seed;
    let schedule = build_schedule(strategy, &train)?;
    let outcome = run_strategy(&schedule, dataset, &train)?;
    let table = binarize_dataset(dataset, &outcome.model, outcome.thresholds.as_ref())?;
    let rules = fold_sem_with(&table, &cfg.fold)?.rules;
    let m = evaluate(&outcome.model, outcome.thresholds.as_ref(), &rules, &dataset.test, &dataset.class_names)?;
    let result = RunResult {
        strategy,
        dataset: name.to_string(),
        seed,
        cnn_accuracy: m.cnn_accuracy,
        nesy_accuracy: m.nesy_accuracy,
        fidelity: m.fidelity,
        ruleset_size: ruleset_size(&rules),
        abstention_rate: m.abstention_rate,
    };
    Ok(RunArtifacts { outcome, rules, result })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCell {
    pub dataset: String,
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

impl DatasetCell {
    /// Unrounded means; `None` when any run failed.
    pub fn mean(&self) -> Option<Metrics> {
        if !self.failures.is_empty() {
            return None;
        }
        Metrics::mean(self.runs.iter().map(RunResult::metrics).collect::<Vec<_>>().iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub strategy: Strategy,
    pub cells: Vec<DatasetCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub dataset: String,
    pub runs: usize,
    pub failed_seeds: Vec<u64>,
    /// Absent when a run failed.
    pub mean: Option<RoundedMetrics>,
}

/// The emitted form of a report: integer cells plus the mean across datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub strategy: Strategy,
    pub cells: Vec<CellRow>,
    pub ms: Option<RoundedMetrics>,
}

impl AggregateReport {
    pub fn new(strategy: Strategy) -> Self {
        AggregateReport {
            strategy,
            cells: Vec::new(),
        }
    }

    pub fn add(&mut self, dataset: &str, outcome: std::result::Result<RunResult, RunFailure>) {
        let idx = match self.cells.iter().position(|c| c.dataset == dataset) {
            Some(i) => i,
            None => {
                self.cells.push(DatasetCell {
                    dataset: dataset.to_string(),
                    runs: Vec::new(),
                    failures: Vec::new(),
                });
                self.cells.sort_by(|a, b| a.dataset.cmp(&b.dataset));
                self.cells.iter().position(|c| c.dataset == dataset).expect("just inserted")
            }
        };
        let cell = &mut self.cells[idx];
        match outcome {
            Ok(r) => {
                cell.runs.push(r);
                cell.runs.sort_by_key(|r| r.seed);
            }
            Err(f) => {
                cell.failures.push(f);
                cell.failures.sort_by_key(|f| f.seed);
            }
        }
    }

    pub fn from_results(strategy: Strategy, results: impl IntoIterator<Item = RunResult>) -> Self {
        let mut r = AggregateReport::new(strategy);
        for res in results {
            let ds = res.dataset.clone();
            r.add(&ds, Ok(res));
        }
        r
    }

    /// Mean across datasets of the unrounded per-dataset means.
    pub fn ms(&self) -> Option<Metrics> {
        let means: Option<Vec<Metrics>> = self.cells.iter().map(DatasetCell::mean).collect();
        Metrics::mean(means?.iter())
    }

    pub fn table(&self) -> ReportTable {
        ReportTable {
            strategy: self.strategy,
            cells: self
                .cells
                .iter()
                .map(|c| CellRow {
                    dataset: c.dataset.clone(),
                    runs: c.runs.len(),
                    failed_seeds: c.failures.iter().map(|f| f.seed).collect(),
                    mean: c.mean().map(|m| m.rounded()),
                })
                .collect(),
            ms: self.ms().map(|m| m.rounded()),
        }
    }
}

/// Runs `n_runs` seeds (`base_seed + k`) and aggregates them. A failed run
/// is recorded and marks its cell missing. With `out`, every run result is
/// written to `out/runs/`.
pub fn run_experiment(
    strategy: Strategy,
    name: &str,
    dataset: &DatasetSplit,
    n_runs: usize,
    base_seed: u64,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<AggregateReport> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    let mut report = AggregateReport::new(strategy);
    for k in 0..n_runs as u64 {
        let seed = base_seed + k;
        match run_once(strategy, name, dataset, seed, cfg) {
            Ok(a) => {
                info!(
                    "{strategy} {name} seed {seed}: nesy {:.2} cnn {:.2} size {}",
                    a.result.nesy_accuracy, a.result.cnn_accuracy, a.result.ruleset_size
                );
                if let Some(dir) = out {
                    let runs = dir.join("runs");
                    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
                    a.result.write_json(&runs.join(format!("{strategy}-{name}-seed{seed}.json")))?;
                }
                report.add(name, Ok(a.result));
            }
            Err(e) => {
                warn!("{strategy} {name} seed {seed} failed: {e}");
                report.add(
                    name,
                    Err(RunFailure {
                        seed,
                        error: e.to_string(),
                    }),
                );
            }
        }
    }
    Ok(report)
}

const TABLE1: &str = include_str!("../fixtures/table1.csv");
const TABLE2: &str = include_str!("../fixtures/table2.csv");

/// Printed cells of the two result tables, keyed by (strategy, dataset).
/// The `MS` column is the printed mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PaperTables {
    pub datasets: Vec<String>,
    /// (NeSy accuracy, rule-set size)
    pub table1: BTreeMap<(String, String), (i64, i64)>,
    /// (CNN accuracy, fidelity)
    pub table2: BTreeMap<(String, String), (i64, i64)>,
}

#[derive(Deserialize)]
struct TableRecord {
    strategy: String,
    dataset: String,
    #[serde(alias = "accuracy", alias = "cnn_accuracy")]
    a: i64,
    #[serde(alias = "ruleset_size", alias = "fidelity")]
    b: i64,
}

fn read_table(text: &str, datasets: &mut Vec<String>) -> Result<BTreeMap<(String, String), (i64, i64)>> {
    let mut out = BTreeMap::new();
    for rec in csv::Reader::from_reader(text.as_bytes()).deserialize() {
        let r: TableRecord = rec?;
        if r.dataset != "MS" && !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
        out.insert((r.strategy, r.dataset), (r.a, r.b));
    }
    Ok(out)
}

impl PaperTables {
    /// The transcription shipped with the crate.
    pub fn embedded() -> Self {
        PaperTables::parse(TABLE1, TABLE2).expect("bundled fixtures parse")
    }

    pub fn parse(table1: &str, table2: &str) -> Result<Self> {
        let mut datasets = Vec::new();
        let t1 = read_table(table1, &mut datasets)?;
        let t2 = read_table(table2, &mut datasets)?;
        Ok(PaperTables {
            datasets,
            table1: t1,
            table2: t2,
        })
    }

    pub fn read(table1: &Path, table2: &Path) -> Result<Self> {
        let a = fs::read_to_string(table1).map_err(|e| Error::io(table1, e))?;
        let b = fs::read_to_string(table2).map_err(|e| Error::io(table2, e))?;
        PaperTables::parse(&a, &b)
    }

    pub fn strategies(&self) -> Vec<String> {
        let mut s: Vec<String> = self.table1.keys().map(|(s, _)| s.clone()).collect();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimEntry {
    pub id: String,
    pub description: String,
    pub expected: i64,
    pub computed: Option<i64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimsLedger {
    pub entries: Vec<ClaimEntry>,
    /// Stated figures that the printed tables do not support; listed for
    /// visibility and not counted as checks.
    pub notes: Vec<String>,
}

impl ClaimsLedger {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> Vec<&ClaimEntry> {
        self.entries.iter().filter(|e| !e.pass).collect()
    }
}

fn mean_rounded(values: &[i64]) -> i64 {
    round_half_up(values.iter().sum::<i64>() as f64 / values.len() as f64)
}

fn reduction_pct(base: i64, new: i64) -> i64 {
    round_half_up(100.0 * (base - new) as f64 / base as f64)
}

/// Recomputes every MS cell from its row and the headline deltas quoted in
/// the results text.
pub fn check_paper_claims(t: &PaperTables) -> ClaimsLedger {
    let mut entries = Vec::new();
    let mut push = |id: String, description: String, expected: i64, computed: Option<i64>| {
        let pass = computed == Some(expected);
        entries.push(ClaimEntry {
            id,
            description,
            expected,
            computed,
            pass,
        });
    };
    let columns: [(&str, &BTreeMap<(String, String), (i64, i64)>, bool); 4] = [
        ("table1.accuracy", &t.table1, true),
        ("table1.ruleset_size", &t.table1, false),
        ("table2.cnn_accuracy", &t.table2, true),
        ("table2.fidelity", &t.table2, false),
    ];
    for s in t.strategies() {
        for (name, table, first) in columns {
            let pick = |v: &(i64, i64)| if first { v.0 } else { v.1 };
            let row: Option<Vec<i64>> = t
                .datasets
                .iter()
                .map(|d| table.get(&(s.clone(), d.clone())).map(pick))
                .collect();
            let printed = table.get(&(s.clone(), "MS".into())).map(pick);
            let (Some(printed), Some(row)) = (printed, row) else {
                push(format!("{name}.{s}.MS"), format!("{s} {name} row incomplete"), 0, None);
                continue;
            };
            push(
                format!("{name}.{s}.MS"),
                format!("{s} {name} mean over {} datasets", row.len()),
                printed,
                Some(mean_rounded(&row)),
            );
        }
    }
    let get = |table: &BTreeMap<(String, String), (i64, i64)>, s: &str, d: &str| table.get(&(s.to_string(), d.to_string())).copied();
    let t1 = |s: &str, d: &str| get(&t.table1, s, d);
    let t2 = |s: &str, d: &str| get(&t.table2, s, d);
    let acc_gain = |s: &str, d: &str| Some(t1(s, d)?.0 - t1("NE", d)?.0);
    let size_cut = |s: &str, d: &str| Some(reduction_pct(t1("NE", d)?.1, t1(s, d)?.1));
    let gap = |s: &str| Some(t2(s, "MS")?.0 - t1(s, "MS")?.0);
    let fid_gain = |s: &str| Some(t2(s, "MS")?.1 - t2("NE", "MS")?.1);
    let headline: Vec<(&str, &str, i64, Option<i64>)> = vec![
        ("ts3.accuracy_gain", "TS3 mean accuracy above NE", 9, acc_gain("TS3", "MS")),
        ("ts3.size_reduction_pct", "TS3 mean rule-set size below NE (%)", 53, size_cut("TS3", "MS")),
        ("ts3.cnn_gap", "TS3 CNN mean accuracy minus NeSy mean accuracy", 3, gap("TS3")),
        ("ne.cnn_gap", "NE CNN mean accuracy minus NeSy mean accuracy", 12, gap("NE")),
        ("ts2.accuracy_gain", "TS2 mean accuracy above NE", 8, acc_gain("TS2", "MS")),
        ("ts2.size_reduction_pct", "TS2 mean rule-set size below NE (%)", 33, size_cut("TS2", "MS")),
        ("ts4.accuracy_gain", "TS4 mean accuracy above NE", 1, acc_gain("TS4", "MS")),
        ("ts4.size_reduction_pct", "TS4 mean rule-set size below NE (%)", 61, size_cut("TS4", "MS")),
        ("ts2.fidelity_gain", "TS2 mean fidelity above NE", 7, fid_gain("TS2")),
        ("ts3.fidelity_gain", "TS3 mean fidelity above NE", 7, fid_gain("TS3")),
        ("p10.ts2.accuracy_gain", "TS2 accuracy above NE on P10", 19, acc_gain("TS2", "P10")),
        ("p10.ts3.accuracy_gain", "TS3 accuracy above NE on P10", 17, acc_gain("TS3", "P10")),
        ("p10.ts2.size_reduction_pct", "TS2 rule-set size below NE on P10 (%)", 46, size_cut("TS2", "P10")),
        ("p10.ts3.size_reduction_pct", "TS3 rule-set size below NE on P10 (%)", 55, size_cut("TS3", "P10")),
        ("gt43.ts2.accuracy_gain", "TS2 accuracy above NE on GT43", 6, acc_gain("TS2", "GT43")),
        ("gt43.ts3.accuracy_gain", "TS3 accuracy above NE on GT43", 10, acc_gain("TS3", "GT43")),
        ("gt43.ts2.size_reduction_pct", "TS2 rule-set size below NE on GT43 (%)", 32, size_cut("TS2", "GT43")),
        ("gt43.ts3.size_reduction_pct", "TS3 rule-set size below NE on GT43 (%)", 57, size_cut("TS3", "GT43")),
    ];
    for (id, desc, expected, computed) in headline {
        push(id.into(), desc.into(), expected, computed);
    }
    let mut notes = Vec::new();
    if let Some(g) = gap("TS2") {
        if g != 2 {
            notes.push(format!(
                "text gives a TS2 CNN-to-NeSy gap of 2 points; the MS cells give {} - {} = {g}",
                t2("TS2", "MS").map_or(0, |v| v.0),
                t1("TS2", "MS").map_or(0, |v| v.0)
            ));
        }
    }
    ClaimsLedger { entries, notes }
}
