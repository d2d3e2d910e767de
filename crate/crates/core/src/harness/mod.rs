//! Experiment harness: configuration files, CLI commands, and reporting.
//!
//! The pipeline is four commands sharing one TOML experiment configuration.
//! `gen-data` draws channel realizations and builds the labeled beam datasets;
//! `train` fits the learned strategies and records their training curves;
//! `evaluate` sweeps SNR and stream counts over freshly generated evaluation
//! realizations and writes the result table; `report` aggregates one or more
//! result directories into a markdown summary. `selftest` runs a miniature
//! end-to-end pass, including byte-level determinism checks.
//!
//! CSV files are the canonical outputs; the SVG figures emitted next to them
//! are derived views. All randomness is seeded from the configuration, so a
//! fixed config reproduces every artifact bit for bit (wall-clock columns in
//! `training_summary.csv` excepted).

pub mod plot;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineModel, KnnModel, LinearSvmModel, MlpConfig, MlpModel, SvmConfig};
use crate::beam_select::{self, BeamSelection, SelectionConfig, SelectionRecord};
use crate::channel::{self, ChannelConfig, ChannelRealization};
use crate::dataset::{
    self, image::expand_features_to_image, Dataset, DatasetOptions, EmbedKind, LabeledSample, Side,
};
use crate::ensemble::{self, EnsembleConfig, EnsembleModel};
use crate::error::{Error, Result};
use crate::neuralnet::{
    self, ActivationKind, ClassifierModel, DatasetImages, ImageSource, NetworkSpec, OptimizerKind,
    TensorSet, TrainConfig,
};

const SCHEMA_VERSION: u32 = 1;
const OUT_ENV: &str = "BEAMSELECT_OUT";

// --- strategies -----------------------------------------------------------------

/// Beam-selection strategies the harness can evaluate. The first three need
/// no training; the rest are learned classifiers over per-beam samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Fully digital SVD benchmark over the whole beamspace matrix.
    Zf,
    /// Exhaustive SE-maximizing selection (also the labeling reference).
    Oracle,
    /// Highest-energy beams per side.
    Greedy,
    /// Convolutional classifier over feature images.
    Cnn,
    /// Weighted-vote ensemble of compact convolutional learners.
    Ensemble,
    Knn,
    Svm,
    Mlp,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Zf,
        Strategy::Oracle,
        Strategy::Greedy,
        Strategy::Cnn,
        Strategy::Ensemble,
        Strategy::Knn,
        Strategy::Svm,
        Strategy::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Zf => "zf",
            Strategy::Oracle => "oracle",
            Strategy::Greedy => "greedy",
            Strategy::Cnn => "cnn",
            Strategy::Ensemble => "ensemble",
            Strategy::Knn => "knn",
            Strategy::Svm => "svm",
            Strategy::Mlp => "mlp",
        }
    }

    /// Whether the strategy has a training step (and therefore a checkpoint).
    pub fn trains(self) -> bool {
        !matches!(self, Strategy::Zf | Strategy::Oracle | Strategy::Greedy)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown strategy '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

// --- configuration ----------------------------------------------------------------

/// Dataset sizing, splitting, and evaluation-batch parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Channel realizations behind the training dataset.
    pub n_realizations: usize,
    /// Fraction of realizations (not samples) assigned to the train split.
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Freshly generated realizations for evaluation sweeps.
    pub eval_realizations: usize,
    /// Seed of the evaluation batch; must differ from the channel seed so
    /// evaluation never sees training realizations.
    pub eval_seed: u64,
    /// How feature vectors are embedded into square images.
    pub embed: EmbedKind,
    pub options: DatasetOptions,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_realizations: 1000,
            train_fraction: 0.7,
            split_seed: 101,
            eval_realizations: 200,
            eval_seed: 900_001,
            embed: EmbedKind::OuterProduct,
            options: DatasetOptions::default(),
        }
    }
}

/// Hyperparameters of the non-convolutional baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesSection {
    pub knn_k: usize,
    pub svm: SvmConfig,
    pub mlp: MlpConfig,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        BaselinesSection { knn_k: 5, svm: SvmConfig::default(), mlp: MlpConfig::default() }
    }
}

/// Evaluation sweep grids and the strategy list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// SNR grid for the SE-vs-SNR sweep, in dB, strictly increasing.
    pub snr_db: Vec<f64>,
    /// Stream-count grid for the SE-vs-streams sweep at `fixed_snr_db`;
    /// bounded by the smaller RF chain count.
    pub n_streams: Vec<usize>,
    /// Operating SNR for the stream sweep, the accuracy rows, and the
    /// exported selections.
    pub fixed_snr_db: f64,
    pub strategies: Vec<Strategy>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            n_streams: vec![1, 2, 3, 4],
            fixed_snr_db: 10.0,
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

/// One experiment, end to end. Loaded from a TOML file where every section
/// is optional and falls back to the desk-scale defaults; unknown keys in
/// harness-owned sections are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub channel: ChannelConfig,
    pub selection: SelectionConfig,
    pub dataset: DatasetSection,
    /// Architecture of the main convolutional classifier. The class count is
    /// re-derived per side at training time (`n_rf + 1`), so the value here
    /// is a placeholder.
    pub net: NetworkSpec,
    /// Architecture of the ensemble's weak learners.
    pub ensemble_net: NetworkSpec,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub baselines: BaselinesSection,
    pub sweeps: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            channel: ChannelConfig::default(),
            selection: SelectionConfig::default(),
            dataset: DatasetSection::default(),
            net: NetworkSpec::desk(5, ActivationKind::Swish),
            ensemble_net: NetworkSpec::compact(5, ActivationKind::Swish),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            baselines: BaselinesSection::default(),
            sweeps: SweepSection::default(),
        }
    }
}

fn strictly_increasing<T: PartialOrd>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.channel.validate()?;
        self.selection.validate()?;
        self.selection.resolved_pools(self.channel.n_rx, self.channel.n_tx)?;
        self.train.validate()?;
        self.ensemble.validate()?;
        self.baselines.svm.validate()?;

        let d = &self.dataset;
        if d.n_realizations < 2 {
            return Err(Error::Config(
                "dataset.n_realizations must be at least 2 (the split needs both sides)".into(),
            ));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config("dataset.train_fraction must lie strictly in (0, 1)".into()));
        }
        if d.eval_realizations == 0 {
            return Err(Error::Config("dataset.eval_realizations must be at least 1".into()));
        }
        if d.eval_seed == self.channel.seed {
            return Err(Error::Config(
                "dataset.eval_seed must differ from channel.seed so evaluation \
                 never reuses training realizations"
                    .into(),
            ));
        }
        if self.baselines.knn_k == 0 {
            return Err(Error::Config("baselines.knn_k must be at least 1".into()));
        }

        let s = &self.sweeps;
        if s.snr_db.is_empty() || s.n_streams.is_empty() {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }
        if s.snr_db.iter().any(|v| !v.is_finite()) || !s.fixed_snr_db.is_finite() {
            return Err(Error::Config("sweep SNR values must be finite".into()));
        }
        if !strictly_increasing(&s.snr_db) || !strictly_increasing(&s.n_streams) {
            return Err(Error::Config("sweep grids must be strictly increasing".into()));
        }
        if s.n_streams[0] < 1 || *s.n_streams.last().unwrap() > self.selection.n_streams {
            return Err(Error::Config(format!(
                "sweeps.n_streams must lie within [1, {}] (the configured stream count)",
                self.selection.n_streams
            )));
        }
        if s.strategies.is_empty() {
            return Err(Error::Config("sweeps.strategies must name at least one strategy".into()));
        }
        if s.strategies.iter().collect::<BTreeSet<_>>().len() != s.strategies.len() {
            return Err(Error::Config("sweeps.strategies contains duplicates".into()));
        }

        for net in [&self.net, &self.ensemble_net] {
            if net.input_channels != 3 {
                return Err(Error::Config("network input_channels must be 3".into()));
            }
            for classes in [self.selection.n_rf_tx + 1, self.selection.n_rf_rx + 1] {
                let mut spec = net.clone();
                spec.n_classes = classes;
                spec.validate()?;
            }
        }
        Ok(())
    }
}

/// Reads and validates a TOML experiment configuration. Syntax errors carry
/// the TOML parser's line/column diagnostics.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// --- file layout -------------------------------------------------------------------

fn dataset_file(out: &Path, side: Side) -> PathBuf {
    out.join(format!("dataset_{side}.bsds"))
}

fn activation_tag(a: ActivationKind) -> &'static str {
    match a {
        ActivationKind::Relu => "relu",
        ActivationKind::LeakyRelu(_) => "leaky_relu",
        ActivationKind::Swish => "swish",
        ActivationKind::Sigmoid => "sigmoid",
    }
}

/// Checkpoint basename of a convolutional-classifier variant; the activation
/// and optimizer are part of the name so variants coexist in one directory.
fn cnn_stem(activation: ActivationKind, optimizer: OptimizerKind) -> String {
    format!("cnn-{}-{optimizer}", activation_tag(activation))
}

fn checkpoint_file(out: &Path, strat: Strategy, side: Side, cfg: &ExperimentConfig) -> PathBuf {
    match strat {
        Strategy::Cnn => {
            out.join(format!("{}_{side}.bsnn", cnn_stem(cfg.net.activation, cfg.train.optimizer)))
        }
        Strategy::Ensemble => out.join(format!("ensemble_{side}.bsen")),
        _ => out.join(format!("{}_{side}.bsbl", strat.name())),
    }
}

fn load_datasets(out: &Path) -> Result<(Dataset, Dataset)> {
    let mut sets = Vec::with_capacity(2);
    for side in [Side::Tx, Side::Rx] {
        let path = dataset_file(out, side);
        if !path.exists() {
            return Err(Error::Config(format!(
                "dataset {} not found; run `gen-data` first",
                path.display()
            )));
        }
        let ds = dataset::read_dataset(&path)?;
        if ds.side != side {
            return Err(Error::Mismatch(format!(
                "{} holds a {} dataset",
                path.display(),
                ds.side
            )));
        }
        sets.push(ds);
    }
    let rx = sets.pop().expect("two datasets");
    let tx = sets.pop().expect("two datasets");
    Ok((tx, rx))
}

// --- gen-data -----------------------------------------------------------------------

/// Generates the channel ensemble and both per-side labeled datasets, writing
/// binary artifacts, CSV mirrors, and a console summary.
pub fn cmd_gen_data(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.channel.seed = s;
        cfg.validate()?;
    }
    fs::create_dir_all(out)?;
    let t0 = Instant::now();

    let reals = channel::generate_batch(&cfg.channel, cfg.dataset.n_realizations)?;
    channel::write_realizations(&out.join("channels.bsmc"), &reals)?;
    let (tx, rx) = dataset::build_datasets_both(&reals, &cfg.selection, &cfg.dataset.options)?;
    for ds in [&tx, &rx] {
        dataset::write_dataset(&dataset_file(out, ds.side), ds)?;
        dataset::write_dataset_csv(&out.join(format!("dataset_{}.csv", ds.side)), ds)?;
        let hist = ds
            .label_histogram()
            .iter()
            .enumerate()
            .map(|(c, n)| format!("{c}={n}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!(
            "{} dataset: {} samples over {} realizations, {} features, {} classes",
            ds.side,
            ds.samples.len(),
            ds.n_realizations,
            ds.feature_count,
            ds.class_count
        );
        println!("  label histogram: {hist}");
        if !ds.constant_features.is_empty() {
            let names: Vec<&str> = ds
                .constant_features
                .iter()
                .map(|&i| ds.feature_names[i].as_str())
                .collect();
            println!("  warning: constant feature columns zeroed: {}", names.join(", "));
        }
    }
    println!("wrote {} in {:.1}s", out.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

// --- train --------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SummaryRow {
    strategy: String,
    side: String,
    activation: String,
    optimizer: String,
    seed: Option<u64>,
    train_acc: f64,
    val_acc: f64,
    val_balanced_acc: f64,
    wall_s: f64,
}

fn append_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let existed = path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!existed).from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy triple (train, validation, balanced validation) of a per-sample
/// predictor over feature matrices.
fn matrix_accuracies(
    predict: impl Fn(&[Vec<f64>]) -> Vec<u8>,
    train: (&[Vec<f64>], &[u8]),
    val: (&[Vec<f64>], &[u8]),
    class_count: usize,
) -> (f64, f64, f64) {
    let train_preds = predict(train.0);
    let val_preds = predict(val.0);
    (
        baselines::accuracy(&train_preds, train.1),
        baselines::accuracy(&val_preds, val.1),
        baselines::balanced_accuracy(&val_preds, val.1, class_count),
    )
}

/// Trains the selected strategies on the stored datasets, writing one
/// checkpoint per side plus rows in `training_summary.csv`. The dataset is
/// split by realization with the configured seed, so every strategy and
/// variant sees the identical split.
pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    only: Option<Strategy>,
    activation: Option<ActivationKind>,
    optimizer: Option<OptimizerKind>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(a) = activation {
        cfg.net.activation = a;
        cfg.ensemble_net.activation = a;
    }
    if let Some(o) = optimizer {
        cfg.train.optimizer = o;
        cfg.baselines.mlp.optimizer = o;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.ensemble.seed = s;
        cfg.baselines.svm.seed = s;
        cfg.baselines.mlp.seed = s;
    }
    cfg.validate()?;

    let strategies: Vec<Strategy> = match only {
        Some(s) if !s.trains() => {
            return Err(Error::Config(format!("strategy '{s}' has no training step")))
        }
        Some(s) => vec![s],
        None => cfg.sweeps.strategies.iter().copied().filter(|s| s.trains()).collect(),
    };
    if strategies.is_empty() {
        return Err(Error::Config("no learned strategies selected in sweeps.strategies".into()));
    }

    let (tx_ds, rx_ds) = load_datasets(out)?;
    let mut rows = Vec::new();
    for ds in [&tx_ds, &rx_ds] {
        let (train_ds, val_ds) =
            dataset::split_dataset(ds, cfg.dataset.train_fraction, cfg.dataset.split_seed)?;
        let side = ds.side;
        for &strat in &strategies {
            let t0 = Instant::now();
            let path = checkpoint_file(out, strat, side, &cfg);
            let (mut act, mut opt, mut strat_seed) = (String::new(), String::new(), None);
            let (train_acc, val_acc, val_bal) = match strat {
                Strategy::Cnn => {
                    let mut spec = cfg.net.clone();
                    spec.n_classes = ds.class_count;
                    let train_src = DatasetImages::new(&train_ds, spec.input_side, cfg.dataset.embed);
                    let val_src = DatasetImages::new(&val_ds, spec.input_side, cfg.dataset.embed);
                    let model = neuralnet::train(&spec, &train_src, &val_src, &cfg.train)?;
                    neuralnet::write_model(&path, &model)?;
                    let log_path = out.join(format!(
                        "{}_{side}_log.csv",
                        cnn_stem(spec.activation, cfg.train.optimizer)
                    ));
                    model.training_log.write_csv(&log_path)?;
                    act = activation_tag(spec.activation).to_string();
                    opt = cfg.train.optimizer.to_string();
                    strat_seed = Some(cfg.train.seed);
                    (
                        neuralnet::evaluate_accuracy(&model, &train_src)?,
                        neuralnet::evaluate_accuracy(&model, &val_src)?,
                        neuralnet::evaluate_balanced_accuracy(&model, &val_src)?,
                    )
                }
                Strategy::Ensemble => {
                    let mut spec = cfg.ensemble_net.clone();
                    spec.n_classes = ds.class_count;
                    let train_src = DatasetImages::new(&train_ds, spec.input_side, cfg.dataset.embed);
                    let val_src = DatasetImages::new(&val_ds, spec.input_side, cfg.dataset.embed);
                    let ens =
                        ensemble::train_ensemble(&train_src, &val_src, &cfg.ensemble, &spec, &cfg.train)?;
                    ensemble::write_ensemble(&path, &ens)?;
                    act = activation_tag(spec.activation).to_string();
                    opt = cfg.train.optimizer.to_string();
                    strat_seed = Some(cfg.ensemble.seed);
                    let acc = |src: &dyn ImageSource| -> Result<(f64, f64)> {
                        let preds = ensemble::predict_batch(&ens, src)?;
                        let labels: Vec<u8> = (0..src.len()).map(|i| src.label(i)).collect();
                        Ok((
                            baselines::accuracy(&preds, &labels),
                            baselines::balanced_accuracy(&preds, &labels, ds.class_count),
                        ))
                    };
                    let (train_acc, _) = acc(&train_src)?;
                    let (val_acc, val_bal) = acc(&val_src)?;
                    (train_acc, val_acc, val_bal)
                }
                Strategy::Knn => {
                    let (x, y) = baselines::design_matrix(&train_ds);
                    let (xv, yv) = baselines::design_matrix(&val_ds);
                    let model = baselines::knn_fit(x, y, ds.class_count, cfg.baselines.knn_k)?;
                    baselines::write_baseline(&path, &BaselineModel::Knn(model.clone()))?;
                    matrix_accuracies(
                        |m| baselines::knn_predict_batch(&model, m),
                        (&model.features, &model.labels),
                        (&xv, &yv),
                        ds.class_count,
                    )
                }
                Strategy::Svm => {
                    let (x, y) = baselines::design_matrix(&train_ds);
                    let (xv, yv) = baselines::design_matrix(&val_ds);
                    let model = baselines::svm_train(&x, &y, ds.class_count, &cfg.baselines.svm)?;
                    baselines::write_baseline(&path, &BaselineModel::Svm(model.clone()))?;
                    opt = "sgd".to_string();
                    strat_seed = Some(cfg.baselines.svm.seed);
                    matrix_accuracies(
                        |m| baselines::svm_predict_batch(&model, m),
                        (&x, &y),
                        (&xv, &yv),
                        ds.class_count,
                    )
                }
                Strategy::Mlp => {
                    let (x, y) = baselines::design_matrix(&train_ds);
                    let (xv, yv) = baselines::design_matrix(&val_ds);
                    let model = baselines::mlp_train(&x, &y, ds.class_count, &cfg.baselines.mlp)?;
                    baselines::write_baseline(&path, &BaselineModel::Mlp(model.clone()))?;
                    act = "relu".to_string();
                    opt = cfg.baselines.mlp.optimizer.to_string();
                    strat_seed = Some(cfg.baselines.mlp.seed);
                    matrix_accuracies(
                        |m| baselines::mlp_predict_batch(&model, m),
                        (&x, &y),
                        (&xv, &yv),
                        ds.class_count,
                    )
                }
                Strategy::Zf | Strategy::Oracle | Strategy::Greedy => unreachable!(),
            };
            let wall_s = t0.elapsed().as_secs_f64();
            println!(
                "trained {strat} [{side}]: train acc {train_acc:.3}, val acc {val_acc:.3}, \
                 balanced {val_bal:.3} ({wall_s:.1}s) -> {}",
                path.display()
            );
            rows.push(SummaryRow {
                strategy: strat.name().to_string(),
                side: side.to_string(),
                activation: act,
                optimizer: opt,
                seed: strat_seed,
                train_acc,
                val_acc,
                val_balanced_acc: val_bal,
                wall_s,
            });
        }
    }
    append_summary(&out.join("training_summary.csv"), &rows)?;
    Ok(())
}

// --- evaluate -----------------------------------------------------------------------

/// One aggregated result-table row; see `docs/FORMATS.md` for the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    /// `snr_db`, `n_streams`, or `accuracy`.
    pub sweep: String,
    /// Sweep coordinate: the SNR, the stream count, or the operating SNR of
    /// an accuracy row.
    pub value: f64,
    pub mean_se: f64,
    pub std_se: f64,
    /// Mean per-beam selection accuracy; empty for strategies without one.
    pub accuracy: Option<f64>,
    pub n_realizations: usize,
    pub seed: u64,
}

fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

const RESULT_HEADER: [&str; 8] = [
    "strategy", "sweep", "value", "mean_se", "std_se", "accuracy", "n_realizations", "seed",
];

fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?;
    if headers.iter().ne(RESULT_HEADER) {
        return Err(Error::Format(format!(
            "{}: incompatible results schema (header {:?})",
            path.display(),
            headers
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Everything evaluation needs per trained strategy, keyed by side.
#[derive(Default)]
struct LoadedModels {
    cnn: Option<(ClassifierModel, ClassifierModel)>,
    ensemble: Option<(EnsembleModel, EnsembleModel)>,
    knn: Option<(KnnModel, KnnModel)>,
    svm: Option<(LinearSvmModel, LinearSvmModel)>,
    mlp: Option<(MlpModel, MlpModel)>,
    /// Every convolutional variant present on disk, as `(tag, tx, rx)` with
    /// tags like `swish-adam`; feeds the activation-by-optimizer matrix.
    cnn_variants: Vec<(String, ClassifierModel, ClassifierModel)>,
}

fn require_checkpoint(path: &Path, strat: Strategy) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} not found; run `train --strategy {strat}` first",
            path.display()
        )));
    }
    Ok(())
}

fn check_feature_model(
    path: &Path,
    ds: &Dataset,
    feature_count: usize,
    class_count: usize,
) -> Result<()> {
    if feature_count != ds.feature_count || class_count != ds.class_count {
        return Err(Error::Mismatch(format!(
            "{}: model expects {feature_count} features / {class_count} classes, \
             dataset has {} / {}",
            path.display(),
            ds.feature_count,
            ds.class_count
        )));
    }
    Ok(())
}

fn load_cnn_pair(out: &Path, stem: &str, tx_ds: &Dataset, rx_ds: &Dataset) -> Result<(ClassifierModel, ClassifierModel)> {
    let mut pair = Vec::with_capacity(2);
    for (side, ds) in [(Side::Tx, tx_ds), (Side::Rx, rx_ds)] {
        let path = out.join(format!("{stem}_{side}.bsnn"));
        require_checkpoint(&path, Strategy::Cnn)?;
        let model = neuralnet::read_model(&path)?;
        if model.spec.n_classes != ds.class_count {
            return Err(Error::Mismatch(format!(
                "{}: model has {} classes, dataset has {}",
                path.display(),
                model.spec.n_classes,
                ds.class_count
            )));
        }
        pair.push(model);
    }
    let rx = pair.pop().expect("two models");
    let tx = pair.pop().expect("two models");
    Ok((tx, rx))
}

/// Convolutional variant tags (`activation-optimizer`) with checkpoints for
/// both sides present, in sorted order.
fn discover_cnn_variants(out: &Path) -> Result<Vec<String>> {
    let mut tags = BTreeSet::new();
    for entry in fs::read_dir(out)? {
        let name = entry?.file_name().into_string().unwrap_or_default();
        if let Some(tag) = name.strip_prefix("cnn-").and_then(|r| r.strip_suffix("_tx.bsnn")) {
            if out.join(format!("cnn-{tag}_rx.bsnn")).exists() {
                tags.insert(tag.to_string());
            }
        }
    }
    Ok(tags.into_iter().collect())
}

fn load_models(
    out: &Path,
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    tx_ds: &Dataset,
    rx_ds: &Dataset,
    with_variants: bool,
) -> Result<LoadedModels> {
    let mut models = LoadedModels::default();
    let want = |s: Strategy| strategies.contains(&s);

    if want(Strategy::Cnn) {
        let stem = cnn_stem(cfg.net.activation, cfg.train.optimizer);
        models.cnn = Some(load_cnn_pair(out, &stem, tx_ds, rx_ds)?);
        if with_variants {
            for tag in discover_cnn_variants(out)? {
                let (tx, rx) = load_cnn_pair(out, &format!("cnn-{tag}"), tx_ds, rx_ds)?;
                models.cnn_variants.push((tag, tx, rx));
            }
        }
    }
    if want(Strategy::Ensemble) {
        let mut pair = Vec::with_capacity(2);
        for (side, ds) in [(Side::Tx, tx_ds), (Side::Rx, rx_ds)] {
            let path = checkpoint_file(out, Strategy::Ensemble, side, cfg);
            require_checkpoint(&path, Strategy::Ensemble)?;
            let ens = ensemble::read_ensemble(&path)?;
            if ens.n_classes() != ds.class_count {
                return Err(Error::Mismatch(format!(
                    "{}: ensemble has {} classes, dataset has {}",
                    path.display(),
                    ens.n_classes(),
                    ds.class_count
                )));
            }
            pair.push(ens);
        }
        let rx = pair.pop().expect("two models");
        models.ensemble = Some((pair.pop().expect("two models"), rx));
    }
    for strat in [Strategy::Knn, Strategy::Svm, Strategy::Mlp] {
        if !want(strat) {
            continue;
        }
        let mut loaded = Vec::with_capacity(2);
        for (side, ds) in [(Side::Tx, tx_ds), (Side::Rx, rx_ds)] {
            let path = checkpoint_file(out, strat, side, cfg);
            require_checkpoint(&path, strat)?;
            let model = baselines::read_baseline(&path)?;
            match (&model, strat) {
                (BaselineModel::Knn(m), Strategy::Knn) => {
                    check_feature_model(&path, ds, m.features[0].len(), m.class_count)?
                }
                (BaselineModel::Svm(m), Strategy::Svm) => {
                    check_feature_model(&path, ds, m.feature_count, m.class_count)?
                }
                (BaselineModel::Mlp(m), Strategy::Mlp) => {
                    check_feature_model(&path, ds, m.feature_count(), m.class_count())?
                }
                _ => {
                    return Err(Error::Mismatch(format!(
                        "{} holds a different model type than '{strat}'",
                        path.display()
                    )))
                }
            }
            loaded.push(model);
        }
        let rx = loaded.pop().expect("two models");
        let tx = loaded.pop().expect("two models");
        match (strat, tx, rx) {
            (Strategy::Knn, BaselineModel::Knn(a), BaselineModel::Knn(b)) => {
                models.knn = Some((a, b))
            }
            (Strategy::Svm, BaselineModel::Svm(a), BaselineModel::Svm(b)) => {
                models.svm = Some((a, b))
            }
            (Strategy::Mlp, BaselineModel::Mlp(a), BaselineModel::Mlp(b)) => {
                models.mlp = Some((a, b))
            }
            _ => unreachable!("type checked above"),
        }
    }
    Ok(models)
}

/// Argmax over vote/probability masses with ties toward the lower class,
/// matching every predictor's own decision rule.
fn argmax_mass(mass: &[f64]) -> u8 {
    let mut best = 0usize;
    for (i, &m) in mass.iter().enumerate().skip(1) {
        if m > mass[best] {
            best = i;
        }
    }
    best as u8
}

/// Per-beam "assigned" scores and class predictions of a convolutional
/// classifier: the score is the probability mass off the unassigned class.
fn cnn_scores(
    model: &ClassifierModel,
    samples: &[LabeledSample],
    embed: EmbedKind,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let images = samples
        .iter()
        .map(|s| {
            expand_features_to_image(&s.features, s.beam_index as u64, model.spec.input_side, embed)
        })
        .collect::<Result<Vec<_>>>()?;
    let probs = neuralnet::forward(model, &images, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(probs.iter().map(|p| (1.0 - p[0], argmax_mass(p))).unzip())
}

fn ensemble_scores(
    ens: &EnsembleModel,
    samples: &[LabeledSample],
    embed: EmbedKind,
    target: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let set = TensorSet {
        images: samples
            .iter()
            .map(|s| expand_features_to_image(&s.features, s.beam_index as u64, target, embed))
            .collect::<Result<Vec<_>>>()?,
        labels: samples.iter().map(|s| s.label).collect(),
        class_count: ens.n_classes(),
    };
    let masses = ensemble::predict_masses(ens, &set)?;
    Ok(masses
        .iter()
        .map(|m| {
            let total: f64 = m.iter().sum();
            (1.0 - m[0] / total, argmax_mass(m))
        })
        .unzip())
}

fn knn_scores(model: &KnnModel, samples: &[LabeledSample]) -> (Vec<f64>, Vec<u8>) {
    samples
        .iter()
        .map(|s| {
            let votes = baselines::knn_class_votes(model, &s.features);
            let masses: Vec<f64> = votes.iter().map(|&v| v as f64).collect();
            ((model.k - votes[0]) as f64 / model.k as f64, argmax_mass(&masses))
        })
        .unzip()
}

fn svm_scores(model: &LinearSvmModel, samples: &[LabeledSample]) -> (Vec<f64>, Vec<u8>) {
    samples
        .iter()
        .map(|s| {
            let d = baselines::svm_decision_values(model, &s.features);
            let best_assigned = d[1..].iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            (best_assigned - d[0], argmax_mass(&d))
        })
        .unzip()
}

fn mlp_scores(model: &MlpModel, samples: &[LabeledSample]) -> (Vec<f64>, Vec<u8>) {
    samples
        .iter()
        .map(|s| {
            let p = baselines::mlp_probs(model, &s.features);
            (1.0 - p[0], argmax_mass(&p))
        })
        .unzip()
}

/// The `n_rf` highest-scoring beams, ties toward the lower beam index,
/// returned ascending.
fn top_beams(scores: &[f64], samples: &[LabeledSample], n_rf: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(samples[a].beam_index.cmp(&samples[b].beam_index))
    });
    let mut beams: Vec<usize> = order.into_iter().take(n_rf).map(|i| samples[i].beam_index).collect();
    beams.sort_unstable();
    beams
}

fn pooled_accuracy(
    preds_tx: &[u8],
    tx: &[LabeledSample],
    preds_rx: &[u8],
    rx: &[LabeledSample],
) -> f64 {
    let hits = preds_tx.iter().zip(tx).filter(|(p, s)| **p == s.label).count()
        + preds_rx.iter().zip(rx).filter(|(p, s)| **p == s.label).count();
    hits as f64 / (tx.len() + rx.len()) as f64
}

/// Per-realization evaluation of one learned model pair: decoded selection
/// plus per-beam classification accuracy against the oracle labels.
fn decode_learned(
    scores_preds_tx: (Vec<f64>, Vec<u8>),
    scores_preds_rx: (Vec<f64>, Vec<u8>),
    tx: &[LabeledSample],
    rx: &[LabeledSample],
    sel_cfg: &SelectionConfig,
) -> (BeamSelection, f64) {
    let (scores_tx, preds_tx) = scores_preds_tx;
    let (scores_rx, preds_rx) = scores_preds_rx;
    let sel = BeamSelection {
        tx_beams: top_beams(&scores_tx, tx, sel_cfg.n_rf_tx),
        rx_beams: top_beams(&scores_rx, rx, sel_cfg.n_rf_rx),
    };
    let acc = pooled_accuracy(&preds_tx, tx, &preds_rx, rx);
    (sel, acc)
}

/// Everything one strategy produced on one realization.
struct Outcome {
    name: String,
    se_snr: Vec<f64>,
    se_ns: Vec<f64>,
    se_op: f64,
    accuracy: Option<f64>,
    record: Option<SelectionRecord>,
}

fn sweep_selection(
    h_b: &nalgebra::DMatrix<num_complex::Complex64>,
    sel: &BeamSelection,
    cfg: &ExperimentConfig,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let op_ns = cfg.selection.n_streams;
    let se_snr = cfg
        .sweeps
        .snr_db
        .iter()
        .map(|&s| beam_select::selection_spectral_efficiency(h_b, sel, op_ns, s))
        .collect::<Result<Vec<_>>>()?;
    let se_ns = cfg
        .sweeps
        .n_streams
        .iter()
        .map(|&ns| beam_select::selection_spectral_efficiency(h_b, sel, ns, cfg.sweeps.fixed_snr_db))
        .collect::<Result<Vec<_>>>()?;
    let se_op =
        beam_select::selection_spectral_efficiency(h_b, sel, op_ns, cfg.sweeps.fixed_snr_db)?;
    Ok((se_snr, se_ns, se_op))
}

fn evaluate_realization(
    real: &ChannelRealization,
    id: u64,
    cfg: &ExperimentConfig,
    tx_ds: &Dataset,
    rx_ds: &Dataset,
    models: &LoadedModels,
    strategies: &[Strategy],
) -> Result<Vec<Outcome>> {
    let (tx_samples, rx_samples, oracle_sel) =
        dataset::eval_realization_samples(real, tx_ds, rx_ds, &cfg.dataset.options, id)?;
    let h_b = &real.beamspace;
    let op_ns = cfg.selection.n_streams;
    let embed = cfg.dataset.embed;
    let mut outcomes = Vec::with_capacity(strategies.len() + models.cnn_variants.len());

    for &strat in strategies {
        let outcome = if strat == Strategy::Zf {
            let se_snr = cfg
                .sweeps
                .snr_db
                .iter()
                .map(|&s| beam_select::zf_benchmark(h_b, s, op_ns))
                .collect::<Result<Vec<_>>>()?;
            let se_ns = cfg
                .sweeps
                .n_streams
                .iter()
                .map(|&ns| beam_select::zf_benchmark(h_b, cfg.sweeps.fixed_snr_db, ns))
                .collect::<Result<Vec<_>>>()?;
            let se_op = beam_select::zf_benchmark(h_b, cfg.sweeps.fixed_snr_db, op_ns)?;
            let empty = BeamSelection { tx_beams: vec![], rx_beams: vec![] };
            let record = SelectionRecord::new(
                id,
                strat.name(),
                cfg.sweeps.fixed_snr_db,
                op_ns,
                &empty,
                se_op,
            );
            Outcome {
                name: strat.name().to_string(),
                se_snr,
                se_ns,
                se_op,
                accuracy: None,
                record: Some(record),
            }
        } else {
            let (sel, accuracy) = match strat {
                Strategy::Oracle => (oracle_sel.clone(), None),
                Strategy::Greedy => {
                    (beam_select::greedy_energy_select(h_b, &cfg.selection)?, None)
                }
                Strategy::Cnn => {
                    let (tx_m, rx_m) = models.cnn.as_ref().expect("cnn loaded");
                    let (sel, acc) = decode_learned(
                        cnn_scores(tx_m, &tx_samples, embed)?,
                        cnn_scores(rx_m, &rx_samples, embed)?,
                        &tx_samples,
                        &rx_samples,
                        &cfg.selection,
                    );
                    (sel, Some(acc))
                }
                Strategy::Ensemble => {
                    let (tx_m, rx_m) = models.ensemble.as_ref().expect("ensemble loaded");
                    let target = cfg.ensemble_net.input_side;
                    let (sel, acc) = decode_learned(
                        ensemble_scores(tx_m, &tx_samples, embed, target)?,
                        ensemble_scores(rx_m, &rx_samples, embed, target)?,
                        &tx_samples,
                        &rx_samples,
                        &cfg.selection,
                    );
                    (sel, Some(acc))
                }
                Strategy::Knn => {
                    let (tx_m, rx_m) = models.knn.as_ref().expect("knn loaded");
                    let (sel, acc) = decode_learned(
                        knn_scores(tx_m, &tx_samples),
                        knn_scores(rx_m, &rx_samples),
                        &tx_samples,
                        &rx_samples,
                        &cfg.selection,
                    );
                    (sel, Some(acc))
                }
                Strategy::Svm => {
                    let (tx_m, rx_m) = models.svm.as_ref().expect("svm loaded");
                    let (sel, acc) = decode_learned(
                        svm_scores(tx_m, &tx_samples),
                        svm_scores(rx_m, &rx_samples),
                        &tx_samples,
                        &rx_samples,
                        &cfg.selection,
                    );
                    (sel, Some(acc))
                }
                Strategy::Mlp => {
                    let (tx_m, rx_m) = models.mlp.as_ref().expect("mlp loaded");
                    let (sel, acc) = decode_learned(
                        mlp_scores(tx_m, &tx_samples),
                        mlp_scores(rx_m, &rx_samples),
                        &tx_samples,
                        &rx_samples,
                        &cfg.selection,
                    );
                    (sel, Some(acc))
                }
                Strategy::Zf => unreachable!(),
            };
            let (se_snr, se_ns, se_op) = sweep_selection(h_b, &sel, cfg)?;
            let record = SelectionRecord::new(
                id,
                strat.name(),
                cfg.sweeps.fixed_snr_db,
                op_ns,
                &sel,
                se_op,
            );
            Outcome {
                name: strat.name().to_string(),
                se_snr,
                se_ns,
                se_op,
                accuracy,
                record: Some(record),
            }
        };
        outcomes.push(outcome);
    }

    // Variant checkpoints feed the activation-by-optimizer matrix: accuracy
    // and operating-point SE only, no sweep curves or selection rows.
    for (tag, tx_m, rx_m) in &models.cnn_variants {
        let (sel, acc) = decode_learned(
            cnn_scores(tx_m, &tx_samples, embed)?,
            cnn_scores(rx_m, &rx_samples, embed)?,
            &tx_samples,
            &rx_samples,
            &cfg.selection,
        );
        let se_op =
            beam_select::selection_spectral_efficiency(h_b, &sel, op_ns, cfg.sweeps.fixed_snr_db)?;
        outcomes.push(Outcome {
            name: format!("cnn-{tag}"),
            se_snr: vec![],
            se_ns: vec![],
            se_op,
            accuracy: Some(acc),
            record: None,
        });
    }
    Ok(outcomes)
}

/// Sample mean and (n-1)-normalized standard deviation; a single observation
/// reports zero spread.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluates every configured strategy over a fresh batch of realizations,
/// writing `results.csv`, `selections.csv`, and the derived SVG figures.
pub fn cmd_evaluate(
    config_path: &Path,
    out: &Path,
    only: Option<Strategy>,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.dataset.eval_seed = s;
        cfg.validate()?;
    }
    let strategies: Vec<Strategy> = match only {
        Some(s) => vec![s],
        None => cfg.sweeps.strategies.clone(),
    };

    let (tx_ds, rx_ds) = load_datasets(out)?;
    if tx_ds.selection != cfg.selection {
        return Err(Error::Mismatch(
            "config selection disagrees with the stored dataset; regenerate the data or fix \
             the config"
                .into(),
        ));
    }
    let mut eval_channel = cfg.channel.clone();
    eval_channel.seed = cfg.dataset.eval_seed;
    if !dataset::same_channel_family(&eval_channel, &tx_ds.channel) {
        return Err(Error::Mismatch(
            "config channel disagrees with the stored dataset; regenerate the data or fix \
             the config"
                .into(),
        ));
    }

    let with_variants = only.is_none() || only == Some(Strategy::Cnn);
    let models = load_models(out, &cfg, &strategies, &tx_ds, &rx_ds, with_variants)?;
    let reals = channel::generate_batch(&eval_channel, cfg.dataset.eval_realizations)?;

    let t0 = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let total = reals.len();
    let done = AtomicUsize::new(0);
    let per_real: Vec<Vec<Outcome>> = pool.install(|| {
        reals
            .par_iter()
            .enumerate()
            .map(|(i, real)| {
                let outcome =
                    evaluate_realization(real, i as u64, &cfg, &tx_ds, &rx_ds, &models, &strategies);
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                if k % 25 == 0 || k == total {
                    eprintln!("evaluated {k}/{total} realizations");
                }
                outcome
            })
            .collect::<Result<Vec<_>>>()
    })?;

    // Aggregate across realizations; the inner outcome order is identical
    // for every realization, so column j always names the same strategy.
    let n = per_real.len();
    let k = per_real[0].len();
    let mut rows: Vec<ResultRow> = Vec::new();
    let seed_used = cfg.dataset.eval_seed;
    for j in 0..k {
        let name = per_real[0][j].name.clone();
        let column = |pick: &dyn Fn(&Outcome) -> f64| -> Vec<f64> {
            per_real.iter().map(|r| pick(&r[j])).collect()
        };
        for (gi, &snr) in cfg.sweeps.snr_db.iter().enumerate() {
            if per_real[0][j].se_snr.is_empty() {
                break;
            }
            let (mean_se, std_se) = mean_std(&column(&|o| o.se_snr[gi]));
            rows.push(ResultRow {
                strategy: name.clone(),
                sweep: "snr_db".into(),
                value: snr,
                mean_se,
                std_se,
                accuracy: None,
                n_realizations: n,
                seed: seed_used,
            });
        }
        for (gi, &ns) in cfg.sweeps.n_streams.iter().enumerate() {
            if per_real[0][j].se_ns.is_empty() {
                break;
            }
            let (mean_se, std_se) = mean_std(&column(&|o| o.se_ns[gi]));
            rows.push(ResultRow {
                strategy: name.clone(),
                sweep: "n_streams".into(),
                value: ns as f64,
                mean_se,
                std_se,
                accuracy: None,
                n_realizations: n,
                seed: seed_used,
            });
        }
        if per_real[0][j].accuracy.is_some() {
            let (mean_se, std_se) = mean_std(&column(&|o| o.se_op));
            let (acc, _) = mean_std(&column(&|o| o.accuracy.expect("accuracy present")));
            rows.push(ResultRow {
                strategy: name.clone(),
                sweep: "accuracy".into(),
                value: cfg.sweeps.fixed_snr_db,
                mean_se,
                std_se,
                accuracy: Some(acc),
                n_realizations: n,
                seed: seed_used,
            });
        }
    }
    for row in &rows {
        if !(row.mean_se.is_finite() && row.mean_se >= 0.0 && row.std_se.is_finite()) {
            return Err(Error::Format(format!(
                "aggregated SE for {} at {}={} is not a finite nonnegative number",
                row.strategy, row.sweep, row.value
            )));
        }
    }
    write_results(&out.join("results.csv"), &rows)?;

    let mut records = Vec::new();
    for outcomes in &per_real {
        for o in outcomes {
            if let Some(rec) = &o.record {
                records.push(rec.clone());
            }
        }
    }
    beam_select::write_selection_csv(&out.join("selections.csv"), &records)?;
    write_evaluation_plots(out, &rows)?;

    println!(
        "evaluated {n} realizations x {} strategies in {:.1}s",
        k,
        t0.elapsed().as_secs_f64()
    );
    for row in rows.iter().filter(|r| r.sweep == "accuracy") {
        println!(
            "  {}: accuracy {:.3}, SE {:.3} bits/s/Hz at {} dB",
            row.strategy,
            row.accuracy.expect("accuracy rows carry accuracy"),
            row.mean_se,
            row.value
        );
    }
    Ok(())
}

/// Known strategies first in canonical order, then variants alphabetically.
fn strategy_rank(name: &str) -> (usize, String) {
    match Strategy::ALL.iter().position(|s| s.name() == name) {
        Some(i) => (i, String::new()),
        None => (Strategy::ALL.len(), name.to_string()),
    }
}

fn sweep_series(rows: &[ResultRow], sweep: &str) -> Vec<plot::Series> {
    let mut names: Vec<String> = rows
        .iter()
        .filter(|r| r.sweep == sweep && !r.strategy.contains('-'))
        .map(|r| r.strategy.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    names.sort_by_key(|n| strategy_rank(n));
    names
        .into_iter()
        .map(|name| plot::Series {
            points: rows
                .iter()
                .filter(|r| r.sweep == sweep && r.strategy == name)
                .map(|r| (r.value, r.mean_se))
                .collect(),
            label: name,
        })
        .collect()
}

fn write_evaluation_plots(out: &Path, rows: &[ResultRow]) -> Result<()> {
    let snr = sweep_series(rows, "snr_db");
    if !snr.is_empty() {
        fs::write(
            out.join("se_vs_snr.svg"),
            plot::line_plot("Spectral efficiency vs SNR", "SNR (dB)", "SE (bits/s/Hz)", &snr),
        )?;
    }
    let ns = sweep_series(rows, "n_streams");
    if !ns.is_empty() {
        fs::write(
            out.join("se_vs_streams.svg"),
            plot::line_plot("Spectral efficiency vs streams", "streams", "SE (bits/s/Hz)", &ns),
        )?;
    }
    let mut acc_rows: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.sweep == "accuracy" && !r.strategy.contains('-'))
        .collect();
    acc_rows.sort_by_key(|r| strategy_rank(&r.strategy));
    if !acc_rows.is_empty() {
        let bars: Vec<(String, f64)> = acc_rows
            .iter()
            .map(|r| (r.strategy.clone(), r.accuracy.expect("accuracy rows carry accuracy")))
            .collect();
        fs::write(
            out.join("accuracy.svg"),
            plot::bar_chart("Selection accuracy", "accuracy", &bars),
        )?;
    }
    let mut variant_rows: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.sweep == "accuracy" && r.strategy.starts_with("cnn-"))
        .collect();
    variant_rows.sort_by(|a, b| a.strategy.cmp(&b.strategy));
    if !variant_rows.is_empty() {
        let bars: Vec<(String, f64)> = variant_rows
            .iter()
            .map(|r| {
                (
                    r.strategy.trim_start_matches("cnn-").replace('-', "/"),
                    r.accuracy.expect("accuracy rows carry accuracy"),
                )
            })
            .collect();
        fs::write(
            out.join("accuracy_matrix.svg"),
            plot::bar_chart("Activation x optimizer accuracy", "accuracy", &bars),
        )?;
    }
    Ok(())
}

// --- report -------------------------------------------------------------------------

const MATRIX_ACTIVATIONS: [&str; 2] = ["relu", "swish"];
const MATRIX_OPTIMIZERS: [&str; 3] = ["sgdm", "adam", "rmsprop"];

fn fmt_ms(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

fn md_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

/// Cross-seed aggregate of one `(strategy, sweep, value)` cell.
#[derive(Default)]
struct Cell {
    means: Vec<f64>,
    accs: Vec<f64>,
}

type CellKey = (String, String, u64);

fn cell_key(row: &ResultRow) -> CellKey {
    (row.strategy.clone(), row.sweep.clone(), row.value.to_bits())
}

/// Aggregates result directories (typically one per seed) into a markdown
/// report with the sweep tables, the accuracy comparison, and the
/// activation-by-optimizer matrix, plus aggregate SVG figures.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<()> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one result directory".into()));
    }
    let mut all_rows: Vec<ResultRow> = Vec::new();
    let mut summaries: Vec<SummaryRow> = Vec::new();
    for dir in dirs {
        let path = dir.join("results.csv");
        if !path.exists() {
            return Err(Error::Config(format!(
                "{} has no results.csv; run `evaluate` there first",
                dir.display()
            )));
        }
        all_rows.extend(read_results(&path)?);
        let summary = dir.join("training_summary.csv");
        if summary.exists() {
            let mut r = csv::Reader::from_path(&summary)
                .map_err(|e| Error::Format(format!("{}: {e}", summary.display())))?;
            for row in r.deserialize() {
                summaries.push(row.map_err(|e| Error::Format(format!("{}: {e}", summary.display())))?);
            }
        }
    }

    let mut cells: std::collections::BTreeMap<CellKey, Cell> = std::collections::BTreeMap::new();
    for row in &all_rows {
        let cell = cells.entry(cell_key(row)).or_default();
        cell.means.push(row.mean_se);
        if let Some(a) = row.accuracy {
            cell.accs.push(a);
        }
    }
    let agg_se = |name: &str, sweep: &str, value: f64| -> Option<(f64, f64)> {
        cells
            .get(&(name.to_string(), sweep.to_string(), value.to_bits()))
            .map(|c| mean_std(&c.means))
    };
    let agg_acc = |name: &str| -> Option<(f64, f64)> {
        cells
            .get(&(name.to_string(), "accuracy".to_string(), accuracy_value(&all_rows, name)?))
            .filter(|c| !c.accs.is_empty())
            .map(|c| mean_std(&c.accs))
    };

    let strategies_for = |sweep: &str| -> Vec<String> {
        let mut names: Vec<String> = cells
            .keys()
            .filter(|(_, s, _)| s == sweep)
            .map(|(n, _, _)| n.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        names.sort_by_key(|n| strategy_rank(n));
        names
    };
    let values_for = |sweep: &str| -> Vec<f64> {
        let mut vals: Vec<f64> = cells
            .keys()
            .filter(|(_, s, _)| s == sweep)
            .map(|(_, _, bits)| *bits)
            .collect::<BTreeSet<u64>>()
            .into_iter()
            .map(f64::from_bits)
            .collect();
        vals.sort_by(f64::total_cmp);
        vals
    };

    let mut md = String::new();
    md.push_str("# Beam selection experiment report\n\n");
    md.push_str(&format!(
        "Aggregated over {} result director{}:\n\n",
        dirs.len(),
        if dirs.len() == 1 { "y" } else { "ies" }
    ));
    for dir in dirs {
        md.push_str(&format!("- `{}`\n", dir.display()));
    }
    md.push('\n');

    for (sweep, title, unit) in [
        ("snr_db", "Spectral efficiency vs SNR", "SNR (dB)"),
        ("n_streams", "Spectral efficiency vs stream count", "streams"),
    ] {
        let names = strategies_for(sweep);
        let names: Vec<String> = names.into_iter().filter(|n| !n.contains('-')).collect();
        if names.is_empty() {
            continue;
        }
        md.push_str(&format!("## {title}\n\n"));
        md.push_str("Cells are mean ± std of per-realization SE in bits/s/Hz, aggregated across seeds.\n\n");
        let mut header = vec![unit.to_string()];
        header.extend(names.iter().cloned());
        let rows: Vec<Vec<String>> = values_for(sweep)
            .into_iter()
            .map(|v| {
                let mut row = vec![format!("{v}")];
                for name in &names {
                    row.push(match agg_se(name, sweep, v) {
                        Some((m, s)) => fmt_ms(m, s),
                        None => "—".to_string(),
                    });
                }
                row
            })
            .collect();
        md.push_str(&md_table(&header, &rows));
        md.push('\n');
    }

    // Accuracy comparison across learned strategies.
    let acc_names: Vec<String> = strategies_for("accuracy")
        .into_iter()
        .filter(|n| !n.contains('-'))
        .collect();
    if !acc_names.is_empty() {
        md.push_str("## Selection accuracy\n\n");
        md.push_str(
            "Per-beam classification accuracy against the oracle assignment on the \
             evaluation realizations, with the spectral efficiency of the decoded \
             selection at the operating SNR.\n\n",
        );
        let header =
            vec!["strategy".to_string(), "accuracy".to_string(), "SE (bits/s/Hz)".to_string()];
        let mut table = Vec::new();
        for name in &acc_names {
            let acc = agg_acc(name).map(|(m, s)| fmt_ms(m, s)).unwrap_or("—".into());
            let se = accuracy_value(&all_rows, name)
                .and_then(|bits| agg_se(name, "accuracy", f64::from_bits(bits)))
                .map(|(m, s)| fmt_ms(m, s))
                .unwrap_or("—".into());
            table.push(vec![name.clone(), acc, se]);
        }
        md.push_str(&md_table(&header, &table));
        md.push('\n');
    }

    // Activation-by-optimizer matrix: fixed 2x3 shape, missing cells dashed.
    md.push_str("## Activation × optimizer accuracy matrix\n\n");
    let mut header = vec!["activation".to_string()];
    header.extend(MATRIX_OPTIMIZERS.iter().map(|o| o.to_string()));
    let mut matrix_rows = Vec::new();
    let mut act_means: Vec<(String, f64)> = Vec::new();
    for act in MATRIX_ACTIVATIONS {
        let mut row = vec![act.to_string()];
        let mut present = Vec::new();
        for opt in MATRIX_OPTIMIZERS {
            let name = format!("cnn-{act}-{opt}");
            match agg_acc(&name) {
                Some((m, s)) => {
                    present.push(m);
                    row.push(fmt_ms(m, s));
                }
                None => row.push("—".to_string()),
            }
        }
        if !present.is_empty() {
            act_means.push((act.to_string(), mean_std(&present).0));
        }
        matrix_rows.push(row);
    }
    md.push_str(&md_table(&header, &matrix_rows));
    md.push('\n');

    // Training summary, grouped by strategy/side/variant.
    if !summaries.is_empty() {
        let mut groups: std::collections::BTreeMap<(String, String, String, String), Vec<f64>> =
            std::collections::BTreeMap::new();
        for s in &summaries {
            groups
                .entry((s.strategy.clone(), s.side.clone(), s.activation.clone(), s.optimizer.clone()))
                .or_default()
                .push(s.val_acc);
        }
        md.push_str("## Training summary\n\n");
        md.push_str("Validation accuracy at the end of training, aggregated across runs.\n\n");
        let header: Vec<String> = ["strategy", "side", "activation", "optimizer", "val accuracy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows: Vec<((usize, String), Vec<String>)> = groups
            .into_iter()
            .map(|((strategy, side, act, opt), accs)| {
                let (m, s) = mean_std(&accs);
                let rank = strategy_rank(&strategy);
                let dash = |v: String| if v.is_empty() { "—".to_string() } else { v };
                (rank, vec![strategy, side, dash(act), dash(opt), fmt_ms(m, s)])
            })
            .collect();
        rows.sort();
        let rows: Vec<Vec<String>> = rows.into_iter().map(|(_, r)| r).collect();
        md.push_str(&md_table(&header, &rows));
        md.push('\n');
    }

    // Informational trends.
    md.push_str("## Notes\n\n");
    if let [(a0, m0), (a1, m1)] = &act_means[..] {
        let (hi, lo, hv, lv) = if m1 >= m0 { (a1, a0, m1, m0) } else { (a0, a1, m0, m1) };
        md.push_str(&format!(
            "- Averaged over optimizers, {hi} reaches {hv:.3} selection accuracy vs \
             {lv:.3} for {lo} ({hi} higher by {:.3}).\n",
            hv - lv
        ));
    } else {
        md.push_str(
            "- Swish-vs-ReLU comparison unavailable: the matrix does not cover both \
             activations.\n",
        );
    }
    match (agg_acc("cnn"), agg_acc("mlp")) {
        (Some((c, _)), Some((m, _))) => {
            let (hi, lo, hv, lv) = if c >= m {
                ("The convolutional classifier", "the feature-vector MLP", c, m)
            } else {
                ("The feature-vector MLP", "the convolutional classifier", m, c)
            };
            md.push_str(&format!(
                "- {hi} averages {hv:.3} selection accuracy vs {lv:.3} for {lo}.\n"
            ));
        }
        _ => md.push_str("- CNN-vs-MLP comparison unavailable: one of the two was not evaluated.\n"),
    }
    md.push_str(
        "- The k-NN, SVM, and MLP baselines run with this toolkit's default \
         hyperparameters; they are tuned for comparability within this pipeline, not to \
         reproduce any external implementation.\n",
    );
    md.push('\n');

    fs::create_dir_all(out)?;
    // Aggregate figures: cross-seed means per strategy.
    let snr_names: Vec<String> =
        strategies_for("snr_db").into_iter().filter(|n| !n.contains('-')).collect();
    if !snr_names.is_empty() {
        let series: Vec<plot::Series> = snr_names
            .iter()
            .map(|name| plot::Series {
                label: name.clone(),
                points: values_for("snr_db")
                    .into_iter()
                    .filter_map(|v| agg_se(name, "snr_db", v).map(|(m, _)| (v, m)))
                    .collect(),
            })
            .collect();
        fs::write(
            out.join("report_se_vs_snr.svg"),
            plot::line_plot("Spectral efficiency vs SNR", "SNR (dB)", "SE (bits/s/Hz)", &series),
        )?;
        md.push_str("![SE vs SNR](report_se_vs_snr.svg)\n");
    }
    if !acc_names.is_empty() {
        let bars: Vec<(String, f64)> = acc_names
            .iter()
            .filter_map(|n| agg_acc(n).map(|(m, _)| (n.clone(), m)))
            .collect();
        fs::write(
            out.join("report_accuracy.svg"),
            plot::bar_chart("Selection accuracy", "accuracy", &bars),
        )?;
        md.push_str("![Selection accuracy](report_accuracy.svg)\n");
    }

    fs::write(out.join("report.md"), &md)?;
    println!("wrote {}", out.join("report.md").display());
    Ok(())
}

/// The `value` bits of a strategy's accuracy row, when present.
fn accuracy_value(rows: &[ResultRow], name: &str) -> Option<u64> {
    rows.iter()
        .find(|r| r.strategy == name && r.sweep == "accuracy")
        .map(|r| r.value.to_bits())
}

// --- selftest -----------------------------------------------------------------------

const SELFTEST_CONFIG: &str = r#"schema_version = 1

[channel]
n_tx = 8
n_rx = 4
n_clusters = 4
n_rays = 2
seed = 7

[selection]
n_rf_tx = 2
n_rf_rx = 2
n_streams = 2

[dataset]
n_realizations = 24
train_fraction = 0.7
split_seed = 11
eval_realizations = 6
eval_seed = 9007

[net]
input_side = 16
input_channels = 3
stem_width = 4
dropout_rate = 0.2
n_classes = 3
activation = "swish"

[[net.inception_blocks]]
b1 = 3
b3 = 4
b5 = 2
pool_proj = 2

[ensemble_net]
input_side = 16
input_channels = 3
stem_width = 3
dropout_rate = 0.2
n_classes = 3
activation = "relu"

[[ensemble_net.inception_blocks]]
b1 = 2
b3 = 3
b5 = 2
pool_proj = 2

[train]
max_epochs = 2
minibatch = 16
initial_lr = 1e-3
validation_frequency = 50
optimizer = "adam"
seed = 3

[ensemble]
m1 = 2
subset_fraction = 0.6
seed = 5

[baselines]
knn_k = 3

[baselines.svm]
epochs = 30
seed = 13

[baselines.mlp]
hidden = [16]
epochs = 8
seed = 17

[sweeps]
snr_db = [0.0, 10.0, 20.0]
n_streams = [1, 2]
fixed_snr_db = 10.0
strategies = ["zf", "oracle", "greedy", "cnn", "ensemble", "knn", "svm", "mlp"]
"#;

fn selftest_check(ok: bool, what: &str) -> Result<()> {
    if ok {
        println!("PASS {what}");
        Ok(())
    } else {
        Err(Error::Format(format!("selftest failed: {what}")))
    }
}

fn files_identical(a: &Path, b: &Path) -> Result<bool> {
    Ok(fs::read(a)? == fs::read(b)?)
}

/// Miniature end-to-end pipeline on a small configuration, including
/// byte-level determinism checks. Artifacts land under `<out>/selftest`.
pub fn cmd_selftest(out: &Path, jobs: Option<usize>) -> Result<()> {
    let dir = out.join("selftest");
    let repeat = out.join("selftest-repeat");
    for d in [&dir, &repeat] {
        if d.exists() {
            fs::remove_dir_all(d)?;
        }
        fs::create_dir_all(d)?;
    }
    let config = dir.join("config.toml");
    fs::write(&config, SELFTEST_CONFIG)?;

    cmd_gen_data(&config, &dir, None)?;
    selftest_check(
        dataset_file(&dir, Side::Tx).exists() && dataset_file(&dir, Side::Rx).exists(),
        "gen-data writes both datasets",
    )?;

    cmd_gen_data(&config, &repeat, None)?;
    let same = files_identical(&dir.join("channels.bsmc"), &repeat.join("channels.bsmc"))?
        && files_identical(&dataset_file(&dir, Side::Tx), &dataset_file(&repeat, Side::Tx))?
        && files_identical(&dataset_file(&dir, Side::Rx), &dataset_file(&repeat, Side::Rx))?;
    selftest_check(same, "gen-data is byte-deterministic")?;

    cmd_train(&config, &dir, None, None, None, None)?;
    let cfg = load_config(&config)?;
    let have_checkpoints = Strategy::ALL
        .into_iter()
        .filter(|s| s.trains())
        .all(|s| checkpoint_file(&dir, s, Side::Tx, &cfg).exists()
            && checkpoint_file(&dir, s, Side::Rx, &cfg).exists());
    selftest_check(have_checkpoints, "train writes every checkpoint")?;

    cmd_evaluate(&config, &dir, None, None, jobs)?;
    let rows = read_results(&dir.join("results.csv"))?;
    let se_ok = rows.iter().all(|r| r.mean_se.is_finite() && r.mean_se >= 0.0);
    selftest_check(se_ok, "every aggregated SE is finite and nonnegative")?;
    let se_at = |name: &str, snr: f64| -> Option<f64> {
        rows.iter()
            .find(|r| r.strategy == name && r.sweep == "snr_db" && r.value == snr)
            .map(|r| r.mean_se)
    };
    let ordered = cfg.sweeps.snr_db.iter().all(|&snr| {
        match (se_at("zf", snr), se_at("oracle", snr), se_at("greedy", snr)) {
            (Some(z), Some(o), Some(g)) => z >= o - 1e-9 && o >= g - 1e-9,
            _ => false,
        }
    });
    selftest_check(ordered, "mean SE ordering zf >= oracle >= greedy holds")?;

    let first = (fs::read(dir.join("results.csv"))?, fs::read(dir.join("selections.csv"))?);
    cmd_evaluate(&config, &dir, None, None, jobs)?;
    let second = (fs::read(dir.join("results.csv"))?, fs::read(dir.join("selections.csv"))?);
    selftest_check(first == second, "evaluate is byte-deterministic")?;

    cmd_report(&[dir.clone()], &dir)?;
    let report = fs::read_to_string(dir.join("report.md"))?;
    selftest_check(
        report.contains("## Activation × optimizer accuracy matrix")
            && report.contains("## Spectral efficiency vs SNR"),
        "report renders the matrix and sweep sections",
    )?;

    println!("selftest OK: artifacts in {}", dir.display());
    Ok(())
}

// --- CLI ----------------------------------------------------------------------------

fn parse_activation(s: &str) -> Result<ActivationKind> {
    match s {
        "relu" => Ok(ActivationKind::Relu),
        "swish" => Ok(ActivationKind::Swish),
        "sigmoid" => Ok(ActivationKind::Sigmoid),
        "leaky_relu" => Ok(ActivationKind::LeakyRelu(0.1)),
        _ => Err(Error::Config(format!(
            "unknown activation '{s}'; expected relu, swish, sigmoid, or leaky_relu"
        ))),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "sgdm" => Ok(OptimizerKind::Sgdm),
        "adam" => Ok(OptimizerKind::Adam),
        "rmsprop" => Ok(OptimizerKind::Rmsprop),
        _ => Err(Error::Config(format!(
            "unknown optimizer '{s}'; expected sgdm, adam, or rmsprop"
        ))),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "beamselect",
    about = "Beam selection experiments for beamspace MIMO links",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to $BEAMSELECT_OUT, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate channel realizations and the labeled per-beam datasets.
    #[command(name = "gen-data")]
    GenData {
        #[command(flatten)]
        common: ConfigArgs,
        /// Override the channel seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train learned strategies on the generated dataset.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Train only this strategy (default: every learned strategy in the
        /// config).
        #[arg(long)]
        strategy: Option<String>,
        /// Override the network activation (relu, swish, sigmoid, leaky_relu).
        #[arg(long)]
        activation: Option<String>,
        /// Override the optimizer (sgdm, adam, rmsprop).
        #[arg(long)]
        optimizer: Option<String>,
        /// Override the training seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep SNR and stream counts over fresh evaluation realizations.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Evaluate only this strategy.
        #[arg(long)]
        strategy: Option<String>,
        /// Override the evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for the evaluation sweep (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Aggregate result directories into a markdown report.
    Report {
        /// Result directories (each from an `evaluate` run).
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write report.md (default: the first directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a miniature end-to-end pipeline with determinism checks.
    Selftest {
        /// Parent directory for the selftest artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the evaluation stage.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn resolve_out(cli: Option<PathBuf>) -> PathBuf {
    cli.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed } => {
            cmd_gen_data(&common.config, &resolve_out(common.out), seed)
        }
        Command::Train { common, strategy, activation, optimizer, seed } => cmd_train(
            &common.config,
            &resolve_out(common.out),
            strategy.as_deref().map(str::parse).transpose()?,
            activation.as_deref().map(parse_activation).transpose()?,
            optimizer.as_deref().map(parse_optimizer).transpose()?,
            seed,
        ),
        Command::Evaluate { common, strategy, seed, jobs } => cmd_evaluate(
            &common.config,
            &resolve_out(common.out),
            strategy.as_deref().map(str::parse).transpose()?,
            seed,
            jobs,
        ),
        Command::Report { dirs, out } => {
            let out = out.unwrap_or_else(|| dirs[0].clone());
            cmd_report(&dirs, &out)
        }
        Command::Selftest { out, jobs } => cmd_selftest(&resolve_out(out), jobs),
    }
}

/// Binary entry point: parses arguments, runs the subcommand, and exits
/// nonzero with a diagnostic on any error.
pub fn cli_main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
