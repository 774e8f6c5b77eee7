//! End-to-end commands over an output directory: train, extract, eval,
//! explain, label, report and multi-seed experiments.
//!
//! A trained checkpoint is a directory holding `config.json`, `model.json`,
//! `p_matrix.csv`, `thresholds.csv` (absent for TS5), `train_log.jsonl` and
//! `split.json`. Later commands add `table.csv`, `rules.lp`, `rules.json`,
//! `report.json`, `labels.json`, `rules.labelled.lp` and `overlays/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneModel;
use crate::binarization::{binarize_dataset, binarize_images, BinarizationTable};
use crate::dataset::{generate, load_image_folder, DatasetSplit, LabeledImage, LoadOptions, Raster, SplitFractions, SyntheticSpec};
use crate::evaluation::{
    check_paper_claims, evaluate, run_experiment, AggregateReport, ClaimsLedger, ExperimentConfig, PaperTables, ReportTable,
    RunResult,
};
use crate::inference::{FactSet, Interpreter, Justification};
use crate::labelling::{label_filters, label_map, top_activations, top_filter_per_class, FilterLabel, LabelConfig};
use crate::rules::{fold_sem_with, ruleset_size, FoldConfig, RuleSet, DEFAULT_RATIO, DEFAULT_TAIL};
use crate::sparsity::{FilterProbabilityMatrix, ThresholdTensor};
use crate::training::{build_schedule, run_strategy, Strategy, TrainConfig, TrainLog};
use crate::{Error, Result};

pub const OUT_ENV: &str = "NESY_OUT";
pub const DEFAULT_OUT: &str = "out";

/// `"c3"` style preset (C classes, 40 images each, masks on) or a full spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SyntheticSource {
    Preset(String),
    Spec(SyntheticSpec),
}

impl SyntheticSource {
    pub fn spec(&self, image_size: usize, fractions: SplitFractions) -> Result<SyntheticSpec> {
        match self {
            SyntheticSource::Spec(s) => Ok(s.clone()),
            SyntheticSource::Preset(p) => {
                let classes = p
                    .strip_prefix('c')
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown synthetic preset '{p}' (expected c<classes>, e.g. c3)")))?;
                let mut spec = SyntheticSpec::new(classes, 40, image_size, 0);
                spec.with_masks = true;
                spec.fractions = fractions;
                Ok(spec)
            }
        }
    }

    fn name(&self) -> String {
        match self {
            SyntheticSource::Preset(p) => format!("synthetic-{p}"),
            SyntheticSource::Spec(s) => format!("synthetic-c{}", s.classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    /// Directory-per-class image folder.
    pub data: Option<PathBuf>,
    /// Mask folder mirroring `data`.
    pub masks: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
    pub image_size: usize,
    pub fractions: SplitFractions,
    /// Seed of the train/validation/test split of a folder dataset.
    pub split_seed: u64,
    pub out: Option<PathBuf>,
    /// Training seed; run `k` of an experiment uses `seed + k`.
    pub seed: u64,
    pub runs: usize,
    pub ratio: f64,
    pub tail: f64,
    pub train: TrainConfig,
    pub label: LabelConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            strategy: Strategy::Ts3,
            data: None,
            masks: None,
            synthetic: None,
            image_size: 32,
            fractions: SplitFractions::default(),
            split_seed: 0,
            out: None,
            seed: 0,
            runs: 1,
            ratio: DEFAULT_RATIO,
            tail: DEFAULT_TAIL,
            train: TrainConfig::default(),
            label: LabelConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub data: Option<PathBuf>,
    pub synthetic: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
}

fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(k)) = (given, known) else {
        return;
    };
    for (key, v) in g {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            None => out.push(path),
            Some(kv) => unknown_keys(v, kv, &path, out),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let given: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &serde_json::to_value(PipelineConfig::default())?, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: PipelineConfig = serde_json::from_value(given).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies flag overrides, resolves the output root and validates.
    /// Output precedence: flag, then `NESY_OUT`, then the config, then `out`.
    pub fn resolve(mut self, o: &Overrides, env_out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(d) = &o.data {
            self.data = Some(d.clone());
            self.synthetic = None;
        }
        if let Some(s) = &o.synthetic {
            self.synthetic = Some(SyntheticSource::Preset(s.clone()));
            self.data = None;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.runs {
            self.runs = r;
        }
        self.out = Some(
            o.out
                .clone()
                .or(env_out)
                .or(self.out.take())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        );
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match (&self.data, &self.synthetic) {
            (None, None) => problems.push("one of data or synthetic is required".to_string()),
            (Some(_), Some(_)) => problems.push("data and synthetic are mutually exclusive".to_string()),
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            if let Err(e) = s.spec(self.image_size, self.fractions) {
                problems.push(e.to_string());
            }
        }
        if self.runs == 0 {
            problems.push("runs must be at least 1".into());
        }
        if self.image_size < 16 {
            problems.push(format!("image_size must be >= 16, got {}", self.image_size));
        }
        if let Err(e) = SplitFractions::new(self.fractions.train, self.fractions.validation, self.fractions.test) {
            problems.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.fold().validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn fold(&self) -> FoldConfig {
        FoldConfig::new(self.ratio, self.tail)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// Training config with this run's seed applied to init, batches and P.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.sparsity.seed = self.seed;
        t
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            fold: self.fold(),
        }
    }

    pub fn dataset_name(&self) -> String {
        match (&self.synthetic, &self.data) {
            (Some(s), _) => s.name(),
            (None, Some(d)) => d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string()),
            (None, None) => "unknown".into(),
        }
    }

    pub fn load_dataset(&self) -> Result<DatasetSplit> {
        match (&self.synthetic, &self.data) {
            (Some(s), _) => generate(&s.spec(self.image_size, self.fractions)?),
            (None, Some(root)) => {
                if !root.is_dir() {
                    return Err(Error::MissingArtifact(root.clone()));
                }
                let opts = LoadOptions {
                    image_size: self.image_size,
                    masks_root: self.masks.clone(),
                };
                load_image_folder(root, self.fractions, self.split_seed, &opts)
            }
            (None, None) => Err(Error::Config("one of data or synthetic is required".into())),
        }
    }

    /// Writes the effective config. The output root is left out so that a
    /// checkpoint does not depend on where it was written.
    fn write(&self, path: &Path) -> Result<()> {
        let effective = PipelineConfig {
            out: None,
            train: self.train_config(),
            ..self.clone()
        };
        write_json(path, &effective)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// A trained model and what is needed to rebuild its inputs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub config: PipelineConfig,
    pub model: BackboneModel,
    pub p: FilterProbabilityMatrix,
    pub class_names: Vec<String>,
    pub thresholds: Option<ThresholdTensor>,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = PipelineConfig::load(&require(dir.join("config.json"))?)?;
        let model = BackboneModel::load(&require(dir.join("model.json"))?)?;
        let (p, class_names) = FilterProbabilityMatrix::read_csv(&require(dir.join("p_matrix.csv"))?)?;
        let tpath = dir.join("thresholds.csv");
        let thresholds = if tpath.exists() {
            Some(ThresholdTensor::read_csv(&tpath)?)
        } else {
            None
        };
        if let Some(t) = &thresholds {
            if t.len() != model.config.filters {
                return Err(Error::ShapeMismatch {
                    context: "checkpoint thresholds",
                    expected: model.config.filters.to_string(),
                    actual: t.len().to_string(),
                });
            }
        }
        Ok(Checkpoint {
            dir: dir.to_path_buf(),
            config,
            model,
            p,
            class_names,
            thresholds,
        })
    }

    pub fn rules(&self) -> Result<RuleSet> {
        RuleSet::read(&require(self.dir.join("rules.lp"))?, None)
    }

    /// Concept labels written by [`cmd_label`], if any.
    pub fn labels(&self) -> Result<Option<BTreeMap<usize, String>>> {
        let path = self.dir.join("labels.json");
        if !path.exists() {
            return Ok(None);
        }
        let labels: Vec<FilterLabel> = read_json(&path)?;
        Ok(Some(label_map(&labels)))
    }

    fn dataset(&self) -> Result<DatasetSplit> {
        let ds = self.config.load_dataset()?;
        if ds.class_names != self.class_names {
            return Err(Error::Dataset(format!(
                "dataset classes {:?} differ from checkpoint classes {:?}",
                ds.class_names, self.class_names
            )));
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub thresholds: bool,
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let dataset = cfg.load_dataset()?;
    let train = cfg.train_config();
    let schedule = build_schedule(cfg.strategy, &train)?;
    info!("training {} on {} with seed {}", cfg.strategy, cfg.dataset_name(), cfg.seed);
    let outcome = match run_strategy(&schedule, &dataset, &train) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, reason, last_good }) => {
            last_good.save(&dir.join("model.diverged.json"))?;
            return Err(Error::Diverged { epoch, reason, last_good });
        }
        Err(e) => return Err(e),
    };
    cfg.write(&dir.join("config.json"))?;
    outcome.model.save(&dir.join("model.json"))?;
    outcome.p.write_csv(&dir.join("p_matrix.csv"), &dataset.class_names)?;
    let tpath = dir.join("thresholds.csv");
    match &outcome.thresholds {
        Some(t) => t.write_csv(&tpath)?,
        None if tpath.exists() => fs::remove_file(&tpath).map_err(|e| Error::io(&tpath, e))?,
        None => {}
    }
    outcome.log.write_jsonl(&dir.join("train_log.jsonl"))?;
    dataset.write_manifest(&dir.join("split.json"))?;
    let last = outcome.log.records.last().expect("at least one epoch");
    Ok(TrainSummary {
        strategy: cfg.strategy,
        seed: cfg.seed,
        epochs: outcome.log.records.len(),
        final_train_loss: last.total,
        final_val_loss: last.val_loss,
        thresholds: outcome.thresholds.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub rows: usize,
    pub ruleset_size: usize,
    pub class_rules: usize,
    pub ab_rules: usize,
    /// Training images no class rule covers.
    pub uncovered: Vec<String>,
}

pub fn cmd_extract(dir: &Path) -> Result<ExtractSummary> {
    let ck = Checkpoint::load(dir)?;
    let dataset = ck.dataset()?;
    let table = binarize_dataset(&dataset, &ck.model, ck.thresholds.as_ref())?;
    table.write_csv(&dir.join("table.csv"))?;
    let outcome = fold_sem_with(&table, &ck.config.fold())?;
    outcome.rules.write(&dir.join("rules.lp"))?;
    write_json(&dir.join("rules.json"), &outcome.rules)?;
    Ok(ExtractSummary {
        rows: table.len(),
        ruleset_size: ruleset_size(&outcome.rules),
        class_rules: outcome.rules.class_rules.len(),
        ab_rules: outcome.rules.ab_rules.len(),
        uncovered: outcome.uncovered,
    })
}

/// Test-split metrics of the checkpoint and its extracted rules.
pub fn cmd_eval(dir: &Path) -> Result<RunResult> {
    let ck = Checkpoint::load(dir)?;
    let rules = ck.rules()?;
    let dataset = ck.dataset()?;
    let m = evaluate(&ck.model, ck.thresholds.as_ref(), &rules, &dataset.test, &dataset.class_names)?;
    let result = RunResult {
        strategy: ck.config.strategy,
        dataset: ck.config.dataset_name(),
        seed: ck.config.seed,
        cnn_accuracy: m.cnn_accuracy,
        nesy_accuracy: m.nesy_accuracy,
        fidelity: m.fidelity,
        ruleset_size: ruleset_size(&rules),
        abstention_rate: m.abstention_rate,
    };
    write_json(&dir.join("report.json"), &result)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_id: String,
    /// `None` when no rule fires.
    pub class: Option<String>,
    pub facts: Vec<usize>,
    pub justification: Option<Justification>,
}

impl Explanation {
    pub fn render_text(&self) -> String {
        match (&self.class, &self.justification) {
            (Some(c), Some(j)) => format!("{}: {c}\n{}", self.image_id, j.render_text()),
            _ => format!("{}: no rule fires\n", self.image_id),
        }
    }
}

fn load_png(path: &Path, size: usize) -> Result<LabeledImage> {
    let img = image::open(path)?.to_rgb8();
    let img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    Ok(LabeledImage {
        id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        label: 0,
        pixels: Raster::from_rgb(&img),
        mask: None,
    })
}

/// Classifies one image, given as a PNG/JPEG path or a dataset image id.
pub fn cmd_explain(dir: &Path, image: &str) -> Result<Explanation> {
    let ck = Checkpoint::load(dir)?;
    let mut rules = ck.rules()?;
    if let Some(labels) = ck.labels()? {
        rules = rules.with_labels(labels);
    }
    let path = Path::new(image);
    let im = if path.is_file() {
        load_png(path, ck.model.config.image_size)?
    } else {
        let dataset = ck.dataset()?;
        let found = dataset.all_images().find(|im| im.id == image).cloned();
        found.ok_or_else(|| Error::InvalidArgument(format!("'{image}' is neither an image file nor a dataset id")))?
    };
    let table = binarize_images(&ck.model, std::slice::from_ref(&im), ck.thresholds.as_ref(), &ck.class_names)?;
    let facts = FactSet::from_row(&table.rows[0]);
    let interp = Interpreter::new(&rules)?;
    let justification = interp.justify(&facts);
    Ok(Explanation {
        image_id: im.id,
        class: interp.classify(&facts).map(str::to_string),
        facts: facts.facts.iter().copied().collect(),
        justification,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub labels: Vec<FilterLabel>,
    pub overlays: Vec<PathBuf>,
}

/// Names the rule-set's filters by mask concepts and writes overlays of the
/// top filter of each class.
pub fn cmd_label(dir: &Path) -> Result<LabelSummary> {
    let ck = Checkpoint::load(dir)?;
    let rules = ck.rules()?;
    let dataset = ck.dataset()?;
    let labels = label_filters(&ck.model, &dataset, ck.thresholds.as_ref(), &rules, &ck.config.label)?;
    write_json(&dir.join("labels.json"), &labels)?;
    rules.with_labels(label_map(&labels)).write(&dir.join("rules.labelled.lp"))?;

    let ov_dir = dir.join("overlays");
    create_dir(&ov_dir)?;
    let mut written = Vec::new();
    let filters: BTreeSet<usize> = top_filter_per_class(&rules).into_values().collect();
    for f in filters {
        for (rank, ov) in top_activations(&ck.model, &dataset.train, f, ck.config.label.top_m)?
            .iter()
            .enumerate()
        {
            let path = ov_dir.join(format!("filter{f}_{rank:02}_{}.png", ov.image_id.replace('/', "_")));
            ov.save_png(&path)?;
            written.push(path);
        }
    }
    Ok(LabelSummary {
        labels,
        overlays: written,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutput {
    pub reports: Vec<AggregateReport>,
    pub tables: Vec<ReportTable>,
    pub claims: Option<ClaimsLedger>,
}

fn collect_results(path: &Path, out: &mut Vec<RunResult>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() || e.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".json")) {
                if e.is_file() {
                    match read_json::<RunResult>(&e) {
                        Ok(r) => out.push(r),
                        Err(_) => log::debug!("skipping {} (not a run result)", e.display()),
                    }
                } else {
                    collect_results(&e, out)?;
                }
            }
        }
        Ok(())
    } else {
        out.push(RunResult::read_json(&require(path.to_path_buf())?)?);
        Ok(())
    }
}

/// Aggregates run results (files or directories searched recursively) per
/// strategy. With `claims`, also checks the given table transcriptions.
pub fn cmd_report(results: &[PathBuf], claims: Option<&PaperTables>) -> Result<ReportOutput> {
    let mut runs = Vec::new();
    for p in results {
        collect_results(p, &mut runs)?;
    }
    if runs.is_empty() && claims.is_none() {
        return Err(Error::InvalidArgument("no run results found".into()));
    }
    let mut by_strategy: BTreeMap<Strategy, Vec<RunResult>> = BTreeMap::new();
    for r in runs {
        by_strategy.entry(r.strategy).or_default().push(r);
    }
    let reports: Vec<AggregateReport> = by_strategy
        .into_iter()
        .map(|(s, rs)| AggregateReport::from_results(s, rs))
        .collect();
    Ok(ReportOutput {
        tables: reports.iter().map(AggregateReport::table).collect(),
        reports,
        claims: claims.map(check_paper_claims),
    })
}

pub fn write_report(out: &ReportOutput, path: &Path) -> Result<()> {
    write_json(path, out)
}

/// Runs `cfg.runs` seeds of `cfg.strategy` and writes `aggregate.json`.
pub fn cmd_experiment(cfg: &PipelineConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let dataset = cfg.load_dataset()?;
    cfg.write(&dir.join("config.json"))?;
    let report = run_experiment(
        cfg.strategy,
        &cfg.dataset_name(),
        &dataset,
        cfg.runs,
        cfg.seed,
        &cfg.experiment_config(),
        Some(&dir),
    )?;
    write_json(&dir.join("aggregate.json"), &report)?;
    Ok(report)
}

/// Reads a binarization table written by [`cmd_extract`].
pub fn read_table(dir: &Path) -> Result<BinarizationTable> {
    BinarizationTable::read_csv(&require(dir.join("table.csv"))?)
}

pub fn read_train_log(dir: &Path, strategy: Strategy) -> Result<TrainLog> {
    TrainLog::read_jsonl(&require(dir.join("train_log.jsonl"))?, strategy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_listed() {
        let err = PipelineConfig::from_json(r#"{"synthetic":"c3","bogus":1,"train":{"epoch":3,"sparsity":{"kk":2}}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("train.epoch"), "{err}");
        assert!(err.contains("train.sparsity.kk"), "{err}");
    }

    #[test]
    fn flags_beat_env_beats_config() {
        let cfg = PipelineConfig {
            synthetic: Some(SyntheticSource::Preset("c3".into())),
            out: Some("from-config".into()),
            ..PipelineConfig::default()
        };
        let env = Some(PathBuf::from("from-env"));
        let flag = Overrides {
            out: Some("from-flag".into()),
            seed: Some(7),
            ..Overrides::default()
        };
        let r = cfg.clone().resolve(&flag, env.clone()).unwrap();
        assert_eq!(r.out_dir(), PathBuf::from("from-flag"));
        assert_eq!(r.seed, 7);
        let r = cfg.clone().resolve(&Overrides::default(), env).unwrap();
        assert_eq!(r.out_dir(), PathBuf::from("from-env"));
        let r = cfg.resolve(&Overrides::default(), None).unwrap();
        assert_eq!(r.out_dir(), PathBuf::from("from-config"));
    }

    #[test]
    fn needs_a_data_source() {
        let err = PipelineConfig::default().validate().unwrap_err().to_string();
        assert!(err.contains("data or synthetic"), "{err}");
        let bad = PipelineConfig {
            synthetic: Some(SyntheticSource::Preset("x9".into())),
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn synthetic_spec_object_parses() {
        let cfg = PipelineConfig::from_json(
            r#"{"synthetic":{"classes":2,"per_class":12,"image_size":16,"seed":3,"with_masks":false}}"#,
        )
        .unwrap();
        let spec = cfg.synthetic.unwrap().spec(32, SplitFractions::default()).unwrap();
        assert_eq!((spec.classes, spec.per_class, spec.image_size, spec.seed), (2, 12, 16, 3));
    }
}
