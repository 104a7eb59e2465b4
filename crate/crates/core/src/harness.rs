//! Experiment configuration and orchestration: training runs, evaluation
//! reports and ablation grids, all driven by one TOML file.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gaussian_blobs, holdout, load_cifar_bin, load_image_dir, BlobsConfig, CifarFormat, Dataset};
use crate::error::{invalid, io_err, Error, Result};
use crate::evaluation::{accuracy, aupr_with, auroc, AuprPositive, fpr_detection_error, gen_noise_ood, NoiseKind, DEFAULT_TPR};
use crate::inference::{argmax, predict_all, softmax};
use crate::nn::{Dims, LayerSpec, Mode, Tensor};
use crate::task_split::{group_classes, GroupingStrategy, GroupingTable, OodTargetMode, SubtaskSpec};
use crate::trainer::{load_checkpoint, Event, History, TrainConfig, Trainer};
use crate::tree_model::TreeModel;

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "SPLITENS_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// One network with a plain `N`-way head.
    SingleModel,
    /// Independently trained single models; logits averaged at evaluation.
    NaiveEnsemble,
    #[default]
    SplitEnsemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        #[serde(default)]
        blobs: BlobsConfig,
        #[serde(default)]
        val_fraction: f64,
    },
    ImageDir {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "one")]
        channels: usize,
        num_classes: usize,
        #[serde(default)]
        val_fraction: f64,
    },
    Cifar {
        format: CifarFormat,
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default)]
        val_fraction: f64,
    },
}

fn one() -> usize {
    1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs {
            blobs: BlobsConfig::default(),
            val_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodSource {
    /// The clusters the blob generator held out.
    BlobsHeldOut,
    GaussianNoise { count: usize, seed: u64 },
    UniformNoise { count: usize, seed: u64 },
    ImageDir {
        path: PathBuf,
        #[serde(default = "one")]
        channels: usize,
    },
    Cifar { format: CifarFormat, files: Vec<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSetConfig {
    pub name: String,
    pub source: OodSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubtaskConfig {
    pub n_splits: usize,
    pub grouping: GroupingStrategy,
    /// `class_id,group` lines for semantic grouping.
    pub grouping_table: Option<PathBuf>,
}

impl Default for SubtaskConfig {
    fn default() -> Self {
        Self {
            n_splits: 4,
            grouping: GroupingStrategy::Random,
            grouping_table: None,
        }
    }
}

/// Six 3x3 conv-norm-relu stages over a 16x16 input, then global pooling.
pub fn desk_backbone() -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (out_channels, stride) in [(8, 1), (8, 2), (16, 2), (16, 1), (32, 2), (32, 1)] {
        layers.push(LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride,
            padding: None,
        });
        layers.push(LayerSpec::Norm);
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: Vec<LayerSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: desk_backbone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: BaselineMode,
    pub output_dir: PathBuf,
    /// Members of the naive ensemble.
    pub naive_members: usize,
    pub aupr_positive: AuprPositive,
    pub data: DataConfig,
    pub ood: Vec<OodSetConfig>,
    pub subtasks: SubtaskConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            mode: BaselineMode::SplitEnsemble,
            output_dir: PathBuf::from("runs/experiment"),
            naive_members: 4,
            aupr_positive: AuprPositive::Id,
            data: DataConfig::default(),
            ood: vec![OodSetConfig {
                name: "held_out_blob".into(),
                source: OodSource::BlobsHeldOut,
            }],
            subtasks: SubtaskConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Parses `key=value`; the value is read as a TOML value, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(invalid(format!("override {s:?} has an empty key")));
    }
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(p) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(p.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override key {key:?}: {p} is not a table")))?;
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig {
            keys: vec![e.message().to_string()],
        })?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, v.clone())?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig {
                keys: vec![e.message().trim().to_string()],
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(format!("cannot serialize config: {e}")))
    }

    /// Checks every setting and lists all offending keys.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(Error::InvalidConfig { keys }) = self.train.validate() {
            bad.extend(keys.into_iter().map(|k| format!("train.{k}")));
        }
        if self.naive_members == 0 {
            bad.push("naive_members: must be at least 1".into());
        }
        if self.subtasks.n_splits == 0 {
            bad.push("subtasks.n_splits: must be at least 1".into());
        }
        if self.backbone.layers.is_empty() {
            bad.push("backbone.layers: must not be empty".into());
        }
        let mut must_exist = |key: &str, p: &Path| {
            if !p.exists() {
                bad.push(format!("{key}: {} does not exist", p.display()));
            }
        };
        if let Some(t) = &self.subtasks.grouping_table {
            must_exist("subtasks.grouping_table", t);
        }
        let val = match &self.data {
            DataConfig::Blobs { val_fraction, .. } => *val_fraction,
            DataConfig::ImageDir {
                train,
                test,
                val_fraction,
                ..
            } => {
                must_exist("data.train", train);
                must_exist("data.test", test);
                *val_fraction
            }
            DataConfig::Cifar {
                train,
                test,
                val_fraction,
                ..
            } => {
                for p in train {
                    must_exist("data.train", p);
                }
                for p in test {
                    must_exist("data.test", p);
                }
                *val_fraction
            }
        };
        if !(0.0..1.0).contains(&val) {
            bad.push("data.val_fraction: must be in [0, 1)".into());
        }
        for (i, o) in self.ood.iter().enumerate() {
            match &o.source {
                OodSource::GaussianNoise { count, .. } | OodSource::UniformNoise { count, .. } if *count == 0 => {
                    bad.push(format!("ood[{i}].source.count: must be at least 1"))
                }
                OodSource::BlobsHeldOut if !matches!(self.data, DataConfig::Blobs { .. }) => {
                    bad.push(format!("ood[{i}].source: blobs_held_out needs blob data"))
                }
                _ => {}
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { keys: bad })
        }
    }

    /// `output_dir`, placed under `$SPLITENS_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

pub struct LoadedData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    /// Each OOD set, or why it could not be loaded.
    pub ood: Vec<(String, Result<Dataset>)>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let (train, test, held_out, val_fraction) = match &cfg.data {
        DataConfig::Blobs { blobs, val_fraction } => {
            let b = gaussian_blobs(blobs)?;
            (b.train, b.test, Some(b.ood), *val_fraction)
        }
        DataConfig::ImageDir {
            train,
            test,
            channels,
            num_classes,
            val_fraction,
        } => (
            load_image_dir(train, *channels, Some(*num_classes))?,
            load_image_dir(test, *channels, Some(*num_classes))?,
            None,
            *val_fraction,
        ),
        DataConfig::Cifar {
            format,
            train,
            test,
            val_fraction,
        } => {
            let tr: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
            let te: Vec<&Path> = test.iter().map(PathBuf::as_path).collect();
            (load_cifar_bin(&tr, *format)?, load_cifar_bin(&te, *format)?, None, *val_fraction)
        }
    };
    let (train, val) = if val_fraction > 0.0 {
        let (rest, v) = holdout(&train, val_fraction, cfg.train.seed)?;
        (rest, Some(v))
    } else {
        (train, None)
    };
    let dims = train.dims;
    let ood = cfg
        .ood
        .iter()
        .map(|o| {
            let set = match &o.source {
                OodSource::BlobsHeldOut => held_out
                    .clone()
                    .ok_or_else(|| invalid("held-out blobs need blob data")),
                OodSource::GaussianNoise { count, seed } => noise_set(NoiseKind::Gaussian, dims, *count, *seed),
                OodSource::UniformNoise { count, seed } => noise_set(NoiseKind::Uniform, dims, *count, *seed),
                OodSource::ImageDir { path, channels } => load_image_dir(path, *channels, None),
                OodSource::Cifar { format, files } => {
                    let f: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
                    load_cifar_bin(&f, *format)
                }
            }
            .and_then(|d| {
                if d.dims == dims {
                    Ok(d)
                } else {
                    Err(Error::ShapeMismatch(format!("OOD images are {}, ID images {dims}", d.dims)))
                }
            });
            (o.name.clone(), set)
        })
        .collect();
    Ok(LoadedData { train, val, test, ood })
}

pub fn noise_set(kind: NoiseKind, dims: Dims, count: usize, seed: u64) -> Result<Dataset> {
    let images = gen_noise_ood(kind, dims.numel(), count, seed)?;
    Dataset::new(dims, 1, images, vec![0; count])
}

/// The subtask split a run trains with.
pub fn subtask_spec(cfg: &ExperimentConfig, train: &Dataset) -> Result<SubtaskSpec> {
    let per_class = SubtaskSpec::mean_class_count(&train.labels, train.num_classes);
    match cfg.mode {
        BaselineMode::SingleModel | BaselineMode::NaiveEnsemble => SubtaskSpec::single(train.num_classes, per_class),
        BaselineMode::SplitEnsemble => {
            let table = match &cfg.subtasks.grouping_table {
                Some(p) => Some(GroupingTable::load(p)?),
                None => None,
            };
            group_classes(
                train.num_classes,
                per_class,
                table.as_ref(),
                cfg.subtasks.n_splits,
                &cfg.subtasks.grouping,
                cfg.train.seed,
            )
        }
    }
}

/// A trained model ready for scoring.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Tree(TreeModel),
    /// Single models whose logits are averaged.
    Naive(Vec<TreeModel>),
}

impl TrainedModel {
    pub fn input_dims(&self) -> Dims {
        match self {
            TrainedModel::Tree(m) => m.input_dims(),
            TrainedModel::Naive(ms) => ms[0].input_dims(),
        }
    }

    pub fn flops(&self) -> u64 {
        match self {
            TrainedModel::Tree(m) => m.flops(),
            TrainedModel::Naive(ms) => ms.iter().map(TreeModel::flops).sum(),
        }
    }

    /// `(predicted class, ID score)` per image.
    pub fn score(&self, images: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
        const BATCH: usize = 256;
        match self {
            TrainedModel::Tree(m) => Ok(predict_all(m, images, BATCH)?
                .into_iter()
                .map(|o| (o.predicted_class, o.uncertainty_score))
                .collect()),
            TrainedModel::Naive(ms) => {
                let mut out = Vec::with_capacity(images.len());
                for chunk in images.chunks(BATCH) {
                    let x = Tensor::from_samples(self.input_dims(), chunk)?;
                    let mut mean: Option<Tensor> = None;
                    for m in ms {
                        let l = m.forward(&x, Mode::Eval)?.logits.swap_remove(0);
                        match &mut mean {
                            Some(acc) => acc.add_assign(&l),
                            None => mean = Some(l),
                        }
                    }
                    let mean = mean.ok_or_else(|| invalid("naive ensemble has no members"))?;
                    let n = ms.len() as f64;
                    for b in 0..chunk.len() {
                        let logits: Vec<f64> = (0..mean.dims.channels)
                            .map(|c| mean.data[c * mean.batch + b] / n)
                            .collect();
                        let p = softmax(&logits);
                        let k = argmax(&logits);
                        out.push((k, p[k]));
                    }
                }
                Ok(out)
            }
        }
    }
}

pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub model: TrainedModel,
    pub histories: Vec<History>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn member_count(cfg: &ExperimentConfig) -> usize {
    match cfg.mode {
        BaselineMode::NaiveEnsemble => cfg.naive_members,
        _ => 1,
    }
}

fn member_suffix(cfg: &ExperimentConfig, i: usize) -> String {
    if member_count(cfg) == 1 {
        String::new()
    } else {
        format!("-{i}")
    }
}

/// Trains per the config and writes the resolved config, checkpoints,
/// JSON-lines event logs and the architecture export.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_file(&dir.join("config.resolved.toml"), &cfg.to_toml()?)?;
    let data = load_data(cfg)?;
    cmd_train_on(cfg, &data, &dir)
}

/// [`cmd_train`] on already loaded data.
pub fn cmd_train_on(cfg: &ExperimentConfig, data: &LoadedData, dir: &Path) -> Result<TrainOutcome> {
    let spec = subtask_spec(cfg, &data.train)?;
    let mut models = Vec::new();
    let mut histories = Vec::new();
    for i in 0..member_count(cfg) {
        let suffix = member_suffix(cfg, i);
        let mut tcfg = cfg.train.clone();
        tcfg.seed = cfg.train.seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        let model = TreeModel::init_shared(&cfg.backbone.layers, data.train.dims, &spec, &mut rng)?;
        info!(
            "{}: training member {i} ({} FLOPs, {} params)",
            cfg.name,
            model.flops(),
            model.param_count()
        );
        let mut trainer = Trainer::new(model, tcfg)?;
        let log_path = dir.join(format!("events{suffix}.jsonl"));
        let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
        let mut write_err = None;
        trainer.run(&data.train, data.val.as_ref(), |e: &Event| {
            let line = serde_json::to_string(e).expect("events serialize");
            if let Err(err) = writeln!(log, "{line}") {
                write_err.get_or_insert(err);
            }
        })?;
        if let Some(err) = write_err {
            return Err(io_err(&log_path)(err));
        }
        trainer.save(&dir.join(format!("checkpoint{suffix}.json")))?;
        let arch = trainer.model.export()?;
        write_file(
            &dir.join(format!("architecture{suffix}.json")),
            &serde_json::to_string_pretty(&arch)?,
        )?;
        write_file(&dir.join(format!("architecture{suffix}.dot")), &trainer.model.to_dot()?)?;
        histories.push(trainer.history.clone());
        models.push(trainer.model);
    }
    let model = match cfg.mode {
        BaselineMode::NaiveEnsemble => TrainedModel::Naive(models),
        _ => TrainedModel::Tree(models.pop().expect("one member")),
    };
    Ok(TrainOutcome {
        output_dir: dir.to_path_buf(),
        model,
        histories,
    })
}

/// Loads the model(s) `cmd_train` wrote to `dir`.
pub fn load_trained(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainedModel> {
    let mut models = Vec::new();
    for i in 0..member_count(cfg) {
        let path = dir.join(format!("checkpoint{}.json", member_suffix(cfg, i)));
        let t = Trainer::from_checkpoint(load_checkpoint(&path)?, None)?;
        models.push(t.model);
    }
    Ok(match cfg.mode {
        BaselineMode::NaiveEnsemble => TrainedModel::Naive(models),
        _ => TrainedModel::Tree(models.pop().expect("one member")),
    })
}

/// One line of an evaluation table. Metrics are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub accuracy: f64,
    pub fpr_at_95tpr: Option<f64>,
    pub detection_error: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub flops: u64,
    /// One row per OOD set, then a `mean` row over the sets that loaded.
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean(&self) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.dataset == "mean")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| invalid(format!("csv: {e}"));
        w.write_record(["dataset", "accuracy", "fpr_at_95tpr", "detection_error", "auroc", "aupr", "error"])
            .map_err(csv_err)?;
        let pct = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.2}", 100.0 * v));
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                pct(Some(r.accuracy)),
                pct(r.fpr_at_95tpr),
                pct(r.detection_error),
                pct(r.auroc),
                pct(r.aupr),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Scores the ID test set and every OOD set.
pub fn evaluate(model: &TrainedModel, data: &LoadedData, positive: AuprPositive) -> Result<EvalReport> {
    let id = model.score(&data.test.images)?;
    let preds: Vec<usize> = id.iter().map(|p| p.0).collect();
    let id_scores: Vec<f64> = id.iter().map(|p| p.1).collect();
    let acc = accuracy(&preds, &data.test.labels)?;
    let mut rows = Vec::new();
    if data.ood.is_empty() {
        rows.push(EvalRow {
            dataset: "id".into(),
            accuracy: acc,
            fpr_at_95tpr: None,
            detection_error: None,
            auroc: None,
            aupr: None,
            error: None,
        });
        return Ok(EvalReport {
            flops: model.flops(),
            rows,
        });
    }
    for (name, set) in &data.ood {
        let row = set.as_ref().map_err(|e| e.to_string()).and_then(|d| {
            let scores: Vec<f64> = model.score(&d.images).map_err(|e| e.to_string())?.iter().map(|p| p.1).collect();
            let op = fpr_detection_error(&id_scores, &scores, DEFAULT_TPR).map_err(|e| e.to_string())?;
            Ok(EvalRow {
                dataset: name.clone(),
                accuracy: acc,
                fpr_at_95tpr: Some(op.fpr),
                detection_error: Some(op.detection_error),
                auroc: Some(auroc(&id_scores, &scores).map_err(|e| e.to_string())?),
                aupr: Some(aupr_with(&id_scores, &scores, positive).map_err(|e| e.to_string())?),
                error: None,
            })
        });
        rows.push(row.unwrap_or_else(|e| {
            warn!("OOD set {name}: {e}");
            EvalRow {
                dataset: name.clone(),
                accuracy: acc,
                fpr_at_95tpr: None,
                detection_error: None,
                auroc: None,
                aupr: None,
                error: Some(e),
            }
        }));
    }
    let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let mean = |f: fn(&EvalRow) -> Option<f64>| -> Option<f64> {
        if ok.is_empty() {
            None
        } else {
            Some(ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64)
        }
    };
    let mean_row = EvalRow {
        dataset: "mean".into(),
        accuracy: acc,
        fpr_at_95tpr: mean(|r| r.fpr_at_95tpr),
        detection_error: mean(|r| r.detection_error),
        auroc: mean(|r| r.auroc),
        aupr: mean(|r| r.aupr),
        error: ok.is_empty().then(|| "no OOD set could be evaluated".to_string()),
    };
    rows.push(mean_row);
    Ok(EvalReport {
        flops: model.flops(),
        rows,
    })
}

/// Evaluates the run in the config's output directory and writes
/// `metrics.json` and `metrics.csv` next to it.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    let model = load_trained(cfg, &dir)?;
    let data = load_data(cfg)?;
    let report = evaluate(&model, &data, cfg.aupr_positive)?;
    write_report(&report, &dir)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("metrics.json"), &serde_json::to_string_pretty(report)?)?;
    write_file(&dir.join("metrics.csv"), &report.to_csv()?)
}

/// Axes of an ablation grid; an empty axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub ood_target_mode: Vec<OodTargetMode>,
    pub mct_threshold: Vec<f64>,
    pub n_splits: Vec<usize>,
    pub grouping: Vec<GroupingStrategy>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSettings {
    pub ood_target_mode: OodTargetMode,
    pub mct_threshold: f64,
    pub n_splits: usize,
    pub grouping: GroupingStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub flops: Option<u64>,
    pub splits: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub settings: CellSettings,
    pub runs: Vec<CellRun>,
    /// Means over the runs that succeeded.
    pub mean_accuracy: Option<f64>,
    pub mean_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| invalid(format!("csv: {e}"));
        w.write_record([
            "ood_target_mode",
            "mct_threshold",
            "n_splits",
            "grouping",
            "runs",
            "failed",
            "accuracy",
            "auroc",
        ])
        .map_err(csv_err)?;
        let pct = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.2}", 100.0 * v));
        for c in &self.cells {
            let s = &c.settings;
            w.write_record([
                serde_json::to_value(s.ood_target_mode)?.as_str().unwrap_or_default().to_string(),
                s.mct_threshold.to_string(),
                s.n_splits.to_string(),
                grouping_label(&s.grouping),
                c.runs.len().to_string(),
                c.runs.iter().filter(|r| r.error.is_some()).count().to_string(),
                pct(c.mean_accuracy),
                pct(c.mean_auroc),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn grouping_label(g: &GroupingStrategy) -> String {
    match g {
        GroupingStrategy::Semantic => "semantic".into(),
        GroupingStrategy::Random => "random".into(),
        GroupingStrategy::Explicit { groups } => format!("{groups:?}"),
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Trains and evaluates every grid cell; failures are recorded and the grid continues.
pub fn cmd_ablate(base: &ExperimentConfig, grid: &AblationGrid) -> Result<AblationReport> {
    base.validate()?;
    let root = base.resolved_output_dir();
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    write_file(&root.join("config.resolved.toml"), &base.to_toml()?)?;
    write_file(
        &root.join("grid.toml"),
        &toml::to_string(grid).map_err(|e| invalid(e.to_string()))?,
    )?;
    let data = load_data(base)?;
    let mut cells = Vec::new();
    for mode in axis(&grid.ood_target_mode, base.train.ood_target_mode) {
        for &mct in &axis(&grid.mct_threshold, base.train.mct_threshold) {
            for &n_splits in &axis(&grid.n_splits, base.subtasks.n_splits) {
                for grouping in axis(&grid.grouping, base.subtasks.grouping.clone()) {
                    let settings = CellSettings {
                        ood_target_mode: mode,
                        mct_threshold: mct,
                        n_splits,
                        grouping: grouping.clone(),
                    };
                    let mut runs = Vec::new();
                    for &seed in &axis(&grid.seeds, base.train.seed) {
                        let mut cfg = base.clone();
                        cfg.train.ood_target_mode = mode;
                        cfg.train.mct_threshold = mct;
                        cfg.train.seed = seed;
                        cfg.subtasks.n_splits = n_splits;
                        cfg.subtasks.grouping = grouping.clone();
                        let cell_dir = root.join(format!("cell-{:03}-seed{seed}", cells.len()));
                        let run = fs::create_dir_all(&cell_dir)
                            .map_err(io_err(&cell_dir))
                            .and_then(|_| write_file(&cell_dir.join("config.resolved.toml"), &cfg.to_toml()?))
                            .and_then(|_| cmd_train_on(&cfg, &data, &cell_dir))
                            .and_then(|out| {
                                let report = evaluate(&out.model, &data, cfg.aupr_positive)?;
                                write_report(&report, &cell_dir)?;
                                Ok((out, report))
                            });
                        runs.push(match run {
                            Ok((out, report)) => {
                                let mean = report.mean().or(report.rows.first());
                                CellRun {
                                    seed,
                                    accuracy: mean.map(|r| r.accuracy),
                                    auroc: mean.and_then(|r| r.auroc),
                                    flops: Some(out.model.flops()),
                                    splits: Some(out.histories.iter().map(|h| h.splits().count()).sum()),
                                    error: None,
                                }
                            }
                            Err(e) => {
                                warn!("ablation cell {} seed {seed} failed: {e}", cells.len());
                                CellRun {
                                    seed,
                                    accuracy: None,
                                    auroc: None,
                                    flops: None,
                                    splits: None,
                                    error: Some(e.to_string()),
                                }
                            }
                        });
                    }
                    let mean_of = |f: fn(&CellRun) -> Option<f64>| {
                        let v: Vec<f64> = runs.iter().filter_map(f).collect();
                        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                    };
                    cells.push(AblationCell {
                        mean_accuracy: mean_of(|r| r.accuracy),
                        mean_auroc: mean_of(|r| r.auroc),
                        settings,
                        runs,
                    });
                }
            }
        }
    }
    let report = AblationReport { cells };
    write_file(&root.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    write_file(&root.join("ablation.csv"), &report.to_csv()?)?;
    Ok(report)
}
