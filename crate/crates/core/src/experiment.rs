//! End-to-end runs, ablations, sweeps and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic, load_multiplex, perturb_edges, split_nodes, LabelSet, MultiplexNetwork, NodeSplit, PerturbMode,
    SyntheticSpec,
};
use crate::error::{CoeError, Result};
use crate::experts::{
    expert_accuracy, opinions_from_probabilities, train_experts, train_single_expert, ExpertRoster, KnowledgeField,
    TrainConfig, TrainTrace,
};
use crate::fusion::{accuracy, fuse_all, optimize_theta, vote_rf, vote_wrf, ConfidenceTensor, MarginConfig, ThetaOptimizer};
use crate::numeric::derive_seed;
use crate::refinery::{normalize_layer, refine_layer, KnnMode, LearnerParams, NormalizedAdjacency, RefinedLayer};
use crate::theory::{verify_theory, TheoryReport};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Use symmetrized, normalized raw layers instead of refined ones.
    pub no_gsl: bool,
    /// Drop the high-level experts and every InfoNCE term.
    pub no_he: bool,
    /// Report the unweighted vote instead of the confidence tensor.
    pub rf: bool,
    /// Report the validation-weighted vote instead of the confidence tensor.
    pub wrf: bool,
}

/// Nodes whose opinions fit the confidence tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaNodes {
    Validation,
    TrainValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub epochs: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub knn_k: usize,
    pub order: usize,
    pub layers: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub ablation: AblationFlags,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub refresh_every: usize,
    pub knn_mode: KnnMode,
    pub high_level_ce: bool,
    pub theta_lr: f64,
    pub theta_iterations: usize,
    pub theta_optimizer: ThetaOptimizer,
    pub theta_nodes: ThetaNodes,
    pub norm_cap: Option<f64>,
    pub robustness_ratios: Vec<f64>,
    pub robustness_modes: Vec<PerturbMode>,
    pub alpha_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticSpec::reference(0)),
            epochs: 800,
            lr: 0.001,
            hidden_dim: 128,
            embed_dim: 64,
            knn_k: 15,
            order: 2,
            layers: 2,
            temperature: 0.2,
            alpha: 100.0,
            lambda: 100.0,
            seeds: vec![0, 1, 2, 3, 4],
            ablation: AblationFlags::default(),
            train_fraction: 0.3,
            val_fraction: 0.2,
            refresh_every: 10,
            knn_mode: KnnMode::Exact,
            high_level_ce: true,
            theta_lr: 0.001,
            theta_iterations: 500,
            theta_optimizer: ThetaOptimizer::Adaptive,
            theta_nodes: ThetaNodes::Validation,
            norm_cap: None,
            robustness_ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            robustness_modes: vec![PerturbMode::Add, PerturbMode::Delete],
            alpha_grid: vec![50.0, 100.0, 200.0, 500.0, 1000.0],
            lambda_grid: vec![50.0, 100.0, 200.0, 500.0, 1000.0],
            k_grid: vec![5, 10, 15, 20, 25],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoeError::Invalid("at least one seed is required".into()));
        }
        if self.order == 0 || self.knn_k == 0 {
            return Err(CoeError::Invalid("order and K must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return Err(CoeError::Invalid(format!(
                "split fractions ({}, {}) must be positive and sum to at most 1",
                self.train_fraction, self.val_fraction
            )));
        }
        if self.theta_nodes == ThetaNodes::Validation && self.val_fraction == 0.0 {
            return Err(CoeError::Invalid("fitting Θ on validation nodes needs a validation split".into()));
        }
        if self.robustness_ratios.iter().any(|r| !(0.0..=0.9).contains(r)) {
            return Err(CoeError::Invalid("robustness ratios must lie in [0, 0.9]".into()));
        }
        self.margin().validate()?;
        self.train(0).validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            layers: self.layers,
            temperature: self.temperature,
            knn_k: self.knn_k,
            knn_mode: self.knn_mode,
            refresh_every: self.refresh_every,
            high_level: !self.ablation.no_he,
            high_level_ce: self.high_level_ce,
            mutual_information: !self.ablation.no_he,
            mi_batch: None,
            seed,
        }
    }

    pub fn margin(&self) -> MarginConfig {
        MarginConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            lr: self.theta_lr,
            iterations: self.theta_iterations,
            optimizer: self.theta_optimizer,
            norm_cap: self.norm_cap,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoeError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoeError::json(path, e))
    }
}

/// Loaded dataset plus an optional fixed split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub network: MultiplexNetwork,
    pub labels: LabelSet,
    pub split: Option<NodeSplit>,
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(spec) => {
            let (network, labels) = generate_synthetic(spec)?;
            Ok(Dataset {
                network,
                labels,
                split: None,
            })
        }
        DataSource::Directory { path } => {
            let (network, labels, split) = load_multiplex(path)?;
            Ok(Dataset { network, labels, split })
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub coe: f64,
    pub rf: f64,
    pub wrf: f64,
    /// `(expert name, test accuracy)` in roster order.
    pub experts: Vec<(String, f64)>,
    pub stage1_loss: Vec<f64>,
    pub stage2_loss: Vec<f64>,
}

impl SeedResult {
    /// The accuracy reported for the configured fusion method.
    pub fn headline(&self, flags: AblationFlags) -> f64 {
        if flags.rf {
            self.rf
        } else if flags.wrf {
            self.wrf
        } else {
            self.coe
        }
    }

    /// Best single low-level expert.
    pub fn best_layer_expert(&self) -> f64 {
        self.experts
            .iter()
            .filter(|(n, _)| n.starts_with("layer"))
            .map(|(_, a)| *a)
            .fold(0.0, f64::max)
    }
}

pub fn expert_name(field: KnowledgeField) -> String {
    match field {
        KnowledgeField::Layer(v) => format!("layer{v}"),
        KnowledgeField::Pair(i, j) => format!("pair{i}{j}"),
        KnowledgeField::Total => "total".into(),
    }
}

fn split_for(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<NodeSplit> {
    match &ds.split {
        Some(s) => Ok(s.clone()),
        None => split_nodes(ds.labels.len(), cfg.train_fraction, cfg.val_fraction, derive_seed(seed, 11)),
    }
}

/// Refined (or, without GSL, normalized raw) layers.
pub fn prepare_layers(network: &MultiplexNetwork, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<RefinedLayer>> {
    network
        .layers
        .iter()
        .enumerate()
        .map(|(v, layer)| {
            if cfg.ablation.no_gsl {
                Ok(normalize_layer(layer))
            } else {
                let params = LearnerParams::ones(network.num_nodes, network.feature_dim, cfg.order);
                let mode = match cfg.knn_mode {
                    KnnMode::Lsh { batch_size, num_hashes, num_tables, .. } => KnnMode::Lsh {
                        batch_size,
                        num_hashes,
                        num_tables,
                        seed: derive_seed(seed, 50 + v as u64),
                    },
                    m => m,
                };
                refine_layer(layer, &params, cfg.knn_k, mode)
            }
        })
        .collect()
}

/// Stage 1 for one seed.
pub fn stage_one(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<(ExpertRoster, TrainTrace, NodeSplit)> {
    let split = split_for(ds, cfg, seed).map_err(|e| e.in_stage("split"))?;
    let layers = prepare_layers(&ds.network, cfg, seed).map_err(|e| e.in_stage("refine"))?;
    let features: Vec<Array2<f64>> = ds.network.layers.iter().map(|l| l.features.clone()).collect();
    let (roster, trace) =
        train_experts(&layers, &features, &ds.labels, &split, &cfg.train(seed)).map_err(|e| e.in_stage("experts"))?;
    Ok((roster, trace, split))
}

fn theta_nodes(split: &NodeSplit, which: ThetaNodes) -> Vec<usize> {
    match which {
        ThetaNodes::Validation => split.validation.clone(),
        ThetaNodes::TrainValidation => {
            let mut v: Vec<usize> = split.train.iter().chain(&split.validation).cloned().collect();
            v.sort_unstable();
            v
        }
    }
}

/// Stage 2 plus evaluation on a trained roster.
pub fn stage_two(
    ds: &Dataset,
    roster: &ExpertRoster,
    split: &NodeSplit,
    cfg: &ExperimentConfig,
    seed: u64,
    stage1_loss: Vec<f64>,
) -> Result<(SeedResult, ConfidenceTensor)> {
    let probs = roster.probabilities().map_err(|e| e.in_stage("opinions"))?;
    let order: Vec<usize> = (0..roster.len()).collect();
    let c = ds.labels.num_classes;
    let fit_nodes = theta_nodes(split, cfg.theta_nodes);
    let fit = opinions_from_probabilities(&probs, &fit_nodes, Some(&ds.labels), &order, c)?;
    let (theta, trace) = optimize_theta(&fit, &cfg.margin()).map_err(|e| e.in_stage("fusion"))?;
    let test = opinions_from_probabilities(&probs, &split.test, Some(&ds.labels), &order, c)?;
    let truth: Vec<usize> = split.test.iter().map(|&i| ds.labels.labels[i]).collect();
    let coe = accuracy(&fuse_all(&theta, &test)?, &truth);
    let rf = accuracy(&vote_rf(&test), &truth);
    let val_acc: Vec<f64> = probs
        .iter()
        .map(|p| expert_accuracy(p, &ds.labels, &split.validation))
        .collect();
    let weights = if val_acc.iter().all(|&w| w == 0.0) {
        vec![1.0; val_acc.len()]
    } else {
        val_acc
    };
    let wrf = accuracy(&vote_wrf(&test, &weights)?, &truth);
    let experts = roster
        .experts
        .iter()
        .zip(&probs)
        .map(|(e, p)| (expert_name(e.field), expert_accuracy(p, &ds.labels, &split.test)))
        .collect();
    Ok((
        SeedResult {
            seed,
            coe,
            rf,
            wrf,
            experts,
            stage1_loss,
            stage2_loss: trace.loss,
        },
        theta,
    ))
}

/// Full pipeline for one seed on a loaded dataset.
pub fn run_seed(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let (roster, trace, split) = stage_one(ds, cfg, seed)?;
    Ok(stage_two(ds, &roster, &split, cfg, seed, trace.loss)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub accuracy: f64,
    pub config_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub setting: String,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRow {
    pub setting: String,
    pub seed: u64,
    pub expert: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub config_hash: String,
    pub version: String,
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<Summary>,
    pub experts: Vec<ExpertRow>,
    /// Best single low-level expert per setting and seed.
    pub best_expert: Vec<ExpertRow>,
    /// `max − min` of mean accuracy across settings (sweeps only).
    pub spread: Option<f64>,
    pub theory: Option<TheoryReport>,
    /// Wall-clock seconds; kept out of the serialized report so identical
    /// runs produce identical files.
    #[serde(skip)]
    pub seconds: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl Report {
    fn new(kind: &str, cfg: &ExperimentConfig) -> Self {
        Report {
            kind: kind.into(),
            config_hash: cfg.hash(),
            version: VERSION.into(),
            ..Default::default()
        }
    }

    fn push(&mut self, method: &str, setting: &str, seed: u64, accuracy: f64) {
        self.rows.push(ReportRow {
            method: method.into(),
            setting: setting.into(),
            seed,
            accuracy,
            config_hash: self.config_hash.clone(),
            version: self.version.clone(),
        });
    }

    fn push_experts(&mut self, setting: &str, r: &SeedResult) {
        for (name, acc) in &r.experts {
            self.experts.push(ExpertRow {
                setting: setting.into(),
                seed: r.seed,
                expert: name.clone(),
                accuracy: *acc,
            });
        }
        self.best_expert.push(ExpertRow {
            setting: setting.into(),
            seed: r.seed,
            expert: "max_layer".into(),
            accuracy: r.best_layer_expert(),
        });
    }

    /// Recompute summaries from rows, keeping first-appearance order.
    fn summarize(&mut self) {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.method.clone(), r.setting.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        self.summaries = keys
            .into_iter()
            .map(|(method, setting)| {
                let xs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.setting == setting)
                    .map(|r| r.accuracy)
                    .collect();
                let (mean, std) = mean_std(&xs);
                Summary {
                    method,
                    setting,
                    mean,
                    std,
                    runs: xs.len(),
                }
            })
            .collect();
    }

    pub fn summary(&self, method: &str, setting: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.method == method && s.setting == setting)
    }

    pub fn accuracies(&self, method: &str, setting: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.setting == setting)
            .map(|r| r.accuracy)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,method,setting,seed,accuracy,config_hash,version\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:?},{},{}",
                self.kind, r.method, r.setting, r.seed, r.accuracy, r.config_hash, r.version
            )
            .unwrap();
        }
        for s in &self.summaries {
            writeln!(out, "{},{},{},mean,{:?},{},{}", self.kind, s.method, s.setting, s.mean, self.config_hash, self.version).unwrap();
            if let Some(sd) = s.std {
                writeln!(out, "{},{},{},std,{:?},{},{}", self.kind, s.method, s.setting, sd, self.config_hash, self.version).unwrap();
            }
        }
        for e in self.experts.iter().chain(&self.best_expert) {
            writeln!(
                out,
                "{},expert:{},{},{},{:?},{},{}",
                self.kind, e.expert, e.setting, e.seed, e.accuracy, self.config_hash, self.version
            )
            .unwrap();
        }
        out
    }

    /// Write `report.csv`, `report.json` and, when present, `theory_report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoeError::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| CoeError::io(&csv, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| CoeError::json(&json, e))?;
        fs::write(&json, text).map_err(|e| CoeError::io(&json, e))?;
        if let Some(t) = &self.theory {
            t.save(&dir.join("theory_report.json"))?;
        }
        Ok(())
    }
}

fn per_seed<T, F>(seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    seeds.par_iter().map(|&s| f(s)).collect()
}

/// Full pipeline over every seed.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = load_dataset(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let results = per_seed(&cfg.seeds, |s| run_seed(&ds, cfg, s))?;
    let mut report = Report::new("run", cfg);
    let method = if cfg.ablation.rf {
        "rf"
    } else if cfg.ablation.wrf {
        "wrf"
    } else {
        "coe"
    };
    for r in &results {
        report.push(method, "default", r.seed, r.headline(cfg.ablation));
        if method == "coe" {
            report.push("rf", "default", r.seed, r.rf);
            report.push("wrf", "default", r.seed, r.wrf);
        }
        report.push_experts("default", r);
    }
    report.summarize();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Rerun CoE and the no-GSL variant with every layer perturbed.
pub fn robustness_sweep(cfg: &ExperimentConfig, ratios: &[f64], modes: &[PerturbMode]) -> Result<Report> {
    cfg.validate()?;
    if let Some(r) = ratios.iter().find(|r| !(0.0..=0.9).contains(*r)) {
        return Err(CoeError::Invalid(format!("perturbation ratio {r} outside [0, 0.9]")));
    }
    let start = Instant::now();
    let base = load_dataset(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let no_gsl = ExperimentConfig {
        ablation: AblationFlags {
            no_gsl: true,
            ..cfg.ablation
        },
        ..cfg.clone()
    };
    let mut points = Vec::new();
    for &mode in modes {
        for &ratio in ratios {
            points.push((mode, ratio));
        }
    }
    let mut report = Report::new("robustness", cfg);
    for (mode, ratio) in points {
        let setting = format!("{}={ratio}", mode_name(mode));
        let results = per_seed(&cfg.seeds, |seed| {
            let layers = base
                .network
                .layers
                .iter()
                .enumerate()
                .map(|(v, l)| perturb_edges(l, ratio, mode, derive_seed(seed, 70 + v as u64)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("perturb"))?;
            let ds = Dataset {
                network: MultiplexNetwork::new(layers)?,
                labels: base.labels.clone(),
                split: base.split.clone(),
            };
            Ok((run_seed(&ds, cfg, seed)?, run_seed(&ds, &no_gsl, seed)?))
        })?;
        for (full, raw) in &results {
            report.push("coe", &setting, full.seed, full.coe);
            report.push("no_gsl", &setting, raw.seed, raw.coe);
            report.push_experts(&setting, full);
        }
    }
    report.summarize();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn mode_name(mode: PerturbMode) -> &'static str {
    match mode {
        PerturbMode::Add => "add",
        PerturbMode::Delete => "delete",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Lambda,
    K,
}

impl std::str::FromStr for SweepParam {
    type Err = CoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "lambda" => Ok(SweepParam::Lambda),
            "k" | "K" => Ok(SweepParam::K),
            other => Err(CoeError::Invalid(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

/// Accuracy per grid value. `α` and `λ` only touch Stage 2, so Stage 1 is
/// shared across their grid points.
pub fn sensitivity_sweep(cfg: &ExperimentConfig, param: SweepParam, grid: &[f64]) -> Result<Report> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(CoeError::Invalid("sensitivity grid is empty".into()));
    }
    let start = Instant::now();
    let ds = load_dataset(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let variant = |value: f64| -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        match param {
            SweepParam::Alpha => c.alpha = value,
            SweepParam::Lambda => c.lambda = value,
            SweepParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(CoeError::Invalid(format!("K must be a positive integer, got {value}")));
                }
                c.knn_k = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    };
    let configs: Vec<ExperimentConfig> = grid.iter().map(|&v| variant(v)).collect::<Result<_>>()?;
    let results: Vec<Vec<SeedResult>> = match param {
        SweepParam::K => configs
            .iter()
            .map(|c| per_seed(&cfg.seeds, |s| run_seed(&ds, c, s)))
            .collect::<Result<_>>()?,
        SweepParam::Alpha | SweepParam::Lambda => {
            let per: Vec<Vec<SeedResult>> = per_seed(&cfg.seeds, |s| {
                let (roster, trace, split) = stage_one(&ds, cfg, s)?;
                configs
                    .iter()
                    .map(|c| stage_two(&ds, &roster, &split, c, s, trace.loss.clone()).map(|r| r.0))
                    .collect()
            })?;
            (0..configs.len())
                .map(|g| per.iter().map(|seed_results| seed_results[g].clone()).collect())
                .collect()
        }
    };
    let name = match param {
        SweepParam::Alpha => "alpha",
        SweepParam::Lambda => "lambda",
        SweepParam::K => "k",
    };
    let mut report = Report::new("sensitivity", cfg);
    for (value, res) in grid.iter().zip(&results) {
        let setting = format!("{name}={value}");
        for r in res {
            report.push("coe", &setting, r.seed, r.coe);
            report.push_experts(&setting, r);
        }
    }
    report.summarize();
    let means: Vec<f64> = report.summaries.iter().map(|s| s.mean).collect();
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    report.spread = Some(hi - lo);
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// CoE, RF, WRF, without high-level experts and without structure learning,
/// under identical seeds and splits.
pub fn ablation_suite(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = load_dataset(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let base = ExperimentConfig {
        ablation: AblationFlags::default(),
        ..cfg.clone()
    };
    let no_he = ExperimentConfig {
        ablation: AblationFlags {
            no_he: true,
            ..Default::default()
        },
        ..cfg.clone()
    };
    let no_gsl = ExperimentConfig {
        ablation: AblationFlags {
            no_gsl: true,
            ..Default::default()
        },
        ..cfg.clone()
    };
    let results = per_seed(&cfg.seeds, |s| {
        Ok((run_seed(&ds, &base, s)?, run_seed(&ds, &no_he, s)?, run_seed(&ds, &no_gsl, s)?))
    })?;
    let mut report = Report::new("ablation", cfg);
    for (full, he, gsl) in &results {
        report.push("coe", "default", full.seed, full.coe);
        report.push("rf", "default", full.seed, full.rf);
        report.push("wrf", "default", full.seed, full.wrf);
        report.push("no_he", "default", he.seed, he.coe);
        report.push("no_gsl", "default", gsl.seed, gsl.coe);
        report.push_experts("default", full);
    }
    report.summarize();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// The all-layer fused expert ("&") against an expert trained on the
/// average of the normalized layers ("+").
pub fn fusion_vs_addition(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = load_dataset(&cfg.data).map_err(|e| e.in_stage("data"))?;
    if ds.network.num_layers() < 2 {
        return Err(CoeError::Invalid("fusion comparison requires ≥2 layers".into()));
    }
    let full = ExperimentConfig {
        ablation: AblationFlags {
            no_he: false,
            ..cfg.ablation
        },
        ..cfg.clone()
    };
    let results = per_seed(&cfg.seeds, |s| {
        let (roster, _, split) = stage_one(&ds, &full, s)?;
        let probs = roster.probabilities()?;
        let tot = roster
            .experts
            .iter()
            .position(|e| e.field == KnowledgeField::Total)
            .expect("high-level roster has a total expert");
        let fused = expert_accuracy(&probs[tot], &ds.labels, &split.test);
        let layers = prepare_layers(&ds.network, &full, s)?;
        let refs: Vec<&NormalizedAdjacency> = layers.iter().map(|l| &l.adjacency).collect();
        let avg = RefinedLayer {
            adjacency: NormalizedAdjacency::average(&refs)?,
            degrees: None,
            k: None,
            source: "average".into(),
        };
        let (expert, _) = train_single_expert(avg, &ds.network.layers[0].features, &ds.labels, &split, &full.train(s))
            .map_err(|e| e.in_stage("addition"))?;
        let solo = ExpertRoster {
            experts: vec![expert],
            learners: Default::default(),
            features: vec![ds.network.layers[0].features.clone()],
            num_classes: ds.labels.num_classes,
        };
        let added = expert_accuracy(&solo.probabilities()?[0], &ds.labels, &split.test);
        Ok((s, fused, added))
    })?;
    let mut report = Report::new("fusion_compare", cfg);
    for (s, fused, added) in results {
        report.push("fused", "default", s, fused);
        report.push("added", "default", s, added);
    }
    report.summarize();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Theory checks on the test-node opinions of the first seed's Stage-1 roster.
pub fn theory_on_config(cfg: &ExperimentConfig) -> Result<TheoryReport> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let seed = cfg.seeds[0];
    let (roster, _, split) = stage_one(&ds, cfg, seed)?;
    let probs = roster.probabilities()?;
    let order: Vec<usize> = (0..roster.len()).collect();
    let opinions = opinions_from_probabilities(&probs, &split.test, Some(&ds.labels), &order, ds.labels.num_classes)?;
    verify_theory(Some(&opinions), seed).map_err(|e| e.in_stage("theory"))
}
