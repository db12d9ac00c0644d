//! End-to-end benchmark: ingest, clean, engineer, split, perturb, denoise,
//! train every model on every data variant, evaluate and report.
//!
//! Each stage writes under `<output_dir>/stages/<name>/` together with a
//! `stage.json` holding a key derived from the config subset it depends on
//! and the keys of its inputs. A stage whose key matches is reused.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor2;
use crate::dataset::{
    self, ColumnTable, SplitIndex, DROPOFF_LATITUDE, DROPOFF_LONGITUDE, FARE_AMOUNT, PASSENGER_COUNT,
    PICKUP_DATETIME, PICKUP_LATITUDE, PICKUP_LONGITUDE,
};
use crate::denoiser::{self, AutoencoderSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EvalReport, OodComparison, ReportLabel, Variant, VariantPredictions};
use crate::gat::{self, EdgeMode, GatConfig, GatData, GraphConfig};
use crate::gbdt::{self, FeatureMatrix, GbdtConfig};
use crate::nn::{self, TrainConfig, TrainHistory};
use crate::perturb::{self, NoiseSpec};
use crate::preprocess::{
    self, IqrFilterConfig, KnnImputeConfig, NormStats, DAY_OF_WEEK, HAVERSINE_KM, HOUR_OF_DAY, MONTH,
};
use crate::tslite::{self, TsLiteConfig};
use crate::rng;

/// Model inputs, in matrix column order.
pub const FEATURE_COLUMNS: [&str; 9] = [
    PICKUP_LONGITUDE,
    PICKUP_LATITUDE,
    DROPOFF_LONGITUDE,
    DROPOFF_LATITUDE,
    PASSENGER_COUNT,
    HAVERSINE_KM,
    HOUR_OF_DAY,
    DAY_OF_WEEK,
    MONTH,
];

const COORDINATES: [&str; 4] = [PICKUP_LONGITUDE, PICKUP_LATITUDE, DROPOFF_LONGITUDE, DROPOFF_LATITUDE];

pub const MODELS: [&str; 3] = ["gbdt", "gat", "tslite"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtSection {
    pub enabled: bool,
    pub config: GbdtConfig,
    pub depths: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub validation_fraction: f64,
}

impl Default for GbdtSection {
    fn default() -> Self {
        Self {
            enabled: true,
            config: GbdtConfig::default(),
            depths: gbdt::DEFAULT_DEPTHS.to_vec(),
            lambdas: gbdt::DEFAULT_LAMBDAS.to_vec(),
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatSection {
    pub enabled: bool,
    pub k: usize,
    pub time_window_s: f64,
    pub model: GatConfig,
    pub train: TrainConfig,
    pub ensemble_size: usize,
    pub validation_fraction: f64,
}

impl Default for GatSection {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 8,
            time_window_s: 900.0,
            model: GatConfig::default(),
            train: TrainConfig {
                max_epochs: 15,
                batch_size: 1024,
                optimizer: nn::AdamWConfig {
                    learning_rate: 1e-2,
                    ..nn::AdamWConfig::default()
                },
                ..TrainConfig::default()
            },
            ensemble_size: 5,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsLiteSection {
    pub enabled: bool,
    pub model: TsLiteConfig,
    pub train: TrainConfig,
    pub validation_fraction: f64,
}

impl Default for TsLiteSection {
    fn default() -> Self {
        Self {
            enabled: true,
            model: TsLiteConfig::default(),
            train: TrainConfig::default(),
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub gbdt: GbdtSection,
    pub gat: GatSection,
    pub tslite: TsLiteSection,
}

impl ModelsConfig {
    pub fn enabled(&self) -> Vec<&'static str> {
        let flags = [self.gbdt.enabled, self.gat.enabled, self.tslite.enabled];
        MODELS.iter().zip(flags).filter(|(_, on)| *on).map(|(m, _)| *m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub spec: AutoencoderSpec,
    pub train: TrainConfig,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            spec: AutoencoderSpec::default(),
            train: denoiser::default_train_config(),
        }
    }
}

/// The single declarative description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub chunk_rows: usize,
    /// Noise per column; each spec's seed is mixed with the run seed.
    pub noise: Vec<NoiseSpec>,
    pub impute: KnnImputeConfig,
    pub filter: IqrFilterConfig,
    pub gat_edge_mode: EdgeMode,
    /// Also denoise the fare column.
    pub denoise_target: bool,
    pub denoiser: DenoiserSection,
    pub models: ModelsConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let noisy = [
            PICKUP_LONGITUDE,
            PICKUP_LATITUDE,
            DROPOFF_LONGITUDE,
            DROPOFF_LATITUDE,
            PASSENGER_COUNT,
            FARE_AMOUNT,
        ];
        Self {
            input_path: PathBuf::from("data/sample_10k.csv"),
            output_dir: PathBuf::from("out"),
            seed: 42,
            chunk_rows: dataset::DEFAULT_CHUNK_ROWS,
            noise: noisy
                .iter()
                .enumerate()
                .map(|(i, c)| NoiseSpec {
                    column: c.to_string(),
                    level: 0.1,
                    seed: i as u64,
                })
                .collect(),
            impute: KnnImputeConfig::default(),
            filter: IqrFilterConfig::default(),
            gat_edge_mode: EdgeMode::TemporalSpatial,
            denoise_target: false,
            denoiser: DenoiserSection::default(),
            models: ModelsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config (missing fields take defaults) and applies
    /// dotted `key=value` overrides. Values parse as JSON, else as strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let raw = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                let cfg: PipelineConfig =
                    serde_json::from_slice(&raw).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                cfg
            }
            None => PipelineConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_rows == 0 {
            return Err(Error::Config("chunk_rows must be at least 1".into()));
        }
        for spec in &self.noise {
            if !dataset::TRIP_COLUMNS.contains(&spec.column.as_str()) || spec.column == PICKUP_DATETIME {
                return Err(Error::Config(format!("noise column `{}` is not a numeric trip column", spec.column)));
            }
        }
        self.filter.validate()?;
        self.models.gbdt.config.validate()?;
        for t in [&self.denoiser.train, &self.models.gat.train, &self.models.tslite.train] {
            t.validate()?;
        }
        if self.models.gat.enabled && self.models.gat.ensemble_size < 2 {
            return Err(Error::Config("gat ensemble_size must be at least 2".into()));
        }
        for f in [
            self.models.gbdt.validation_fraction,
            self.models.gat.validation_fraction,
            self.models.tslite.validation_fraction,
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config("validation fractions must be in (0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn seed_for(&self, component: &str) -> u64 {
        rng::derive_seed(self.seed, component)
    }

    pub fn denoise_columns(&self) -> Vec<&'static str> {
        let mut cols = vec![
            PICKUP_LONGITUDE,
            PICKUP_LATITUDE,
            DROPOFF_LONGITUDE,
            DROPOFF_LATITUDE,
            PASSENGER_COUNT,
        ];
        if self.denoise_target {
            cols.push(FARE_AMOUNT);
        }
        cols
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in path.split('.') {
        node = match node {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?,
            Value::Array(items) => part
                .parse::<usize>()
                .ok()
                .and_then(|i| items.get_mut(i))
                .ok_or_else(|| Error::Config(format!("bad index `{part}` in `{path}`")))?,
            _ => return Err(Error::Config(format!("`{path}` does not name a config field"))),
        };
    }
    *node = value;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&raw))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Completion record of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub key: String,
    pub seconds: f64,
    pub outputs: Vec<String>,
}

/// Predictions of one trained model on each test variant it was scored on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutput {
    pub variant: Variant,
    pub rows: Vec<usize>,
    pub pred: Vec<f64>,
    pub actual: Vec<f64>,
    pub variance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPredictions {
    pub model: String,
    pub trained_on: Variant,
    pub outputs: Vec<VariantOutput>,
    pub histories: Vec<TrainHistory>,
    pub notes: BTreeMap<String, Value>,
}

impl ModelPredictions {
    pub fn on(&self, variant: Variant) -> Option<&VariantOutput> {
        self.outputs.iter().find(|o| o.variant == variant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub variant: Variant,
    pub derived_from: Option<Variant>,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLineage {
    pub model: String,
    pub trained_on: Variant,
    pub evaluated_on: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageMeta>,
    pub artifacts: Vec<ArtifactRecord>,
    pub variants: Vec<LineageEdge>,
    pub models: Vec<ModelLineage>,
    pub error: Option<String>,
}

/// Stage names in run order.
pub const STAGES: [&str; 4] = ["ingest", "preprocess", "perturb", "denoise"];

pub struct Pipeline {
    pub config: PipelineConfig,
}

/// Table in raw units plus the split and normalizer shared by all variants.
struct Prepared {
    split: SplitIndex,
    norm: NormStats,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn out(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out().join("stages").join(stage)
    }

    fn hash_key(&self, stage: &str, parts: Value) -> Result<String> {
        let v = json!({ "stage": stage, "version": env!("CARGO_PKG_VERSION"), "parts": parts });
        Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
    }

    /// Expected cache key of a stage under the current config.
    pub fn key(&self, stage: &str) -> Result<String> {
        let c = &self.config;
        match stage {
            "ingest" => {
                let input = file_sha256(&c.input_path)?;
                self.hash_key(stage, json!([input, c.chunk_rows]))
            }
            "preprocess" => self.hash_key(stage, json!([self.key("ingest")?, c.impute, c.filter, c.seed])),
            "perturb" => self.hash_key(stage, json!([self.key("preprocess")?, c.noise, c.seed])),
            "denoise" => self.hash_key(
                stage,
                json!([self.key("perturb")?, c.denoiser, c.denoise_target, c.seed]),
            ),
            "evaluate" => {
                let mut parts = vec![json!(c.eval)];
                for m in c.models.enabled() {
                    for v in Variant::ALL {
                        parts.push(json!(self.key(&train_stage(m, v))?));
                    }
                }
                self.hash_key(stage, Value::Array(parts))
            }
            s if s.starts_with("train_") => {
                let (model, variant) = parse_train_stage(s)?;
                let section = match model {
                    "gbdt" => json!(c.models.gbdt),
                    "gat" => json!([c.models.gat, c.gat_edge_mode]),
                    _ => json!(c.models.tslite),
                };
                // Clean-trained models are also scored on the other test sets.
                let upstream = match variant {
                    Variant::Clean | Variant::Denoised => self.key("denoise")?,
                    Variant::Noisy => self.key("perturb")?,
                };
                self.hash_key(stage, json!([upstream, section, c.seed]))
            }
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }

    pub fn is_cached(&self, stage: &str) -> Result<bool> {
        let meta = self.stage_dir(stage).join("stage.json");
        if !meta.exists() {
            return Ok(false);
        }
        let m: StageMeta = read_json(&meta)?;
        Ok(m.key == self.key(stage)? && m.outputs.iter().all(|o| self.out().join(o).exists()))
    }

    fn require(&self, stage: &str, prerequisite: &str) -> Result<()> {
        if self.is_cached(prerequisite)? {
            Ok(())
        } else {
            Err(Error::MissingStage {
                stage: stage.into(),
                prerequisite: command_for(prerequisite).into(),
            })
        }
    }

    fn finish(&self, stage: &str, started: Instant, outputs: &[PathBuf]) -> Result<()> {
        let rel = outputs
            .iter()
            .map(|p| {
                p.strip_prefix(self.out())
                    .unwrap_or(p)
                    .to_string_lossy()
                    .replace('\\', "/")
            })
            .collect();
        let meta = StageMeta {
            stage: stage.into(),
            key: self.key(stage)?,
            seconds: started.elapsed().as_secs_f64(),
            outputs: rel,
        };
        write_json(&self.stage_dir(stage).join("stage.json"), &meta)
    }

    fn variant_table_path(&self, v: Variant) -> PathBuf {
        match v {
            Variant::Clean => self.stage_dir("preprocess").join("clean.csv"),
            Variant::Noisy => self.stage_dir("perturb").join("noisy.csv"),
            Variant::Denoised => self.stage_dir("denoise").join("denoised.csv"),
        }
    }

    pub fn ingest(&self) -> Result<()> {
        let started = Instant::now();
        let dir = self.stage_dir("ingest");
        ensure_dir(&dir)?;
        let (records, summary) = dataset::read_trips(&self.config.input_path, self.config.chunk_rows)?;
        let table = dataset::to_column_table(&records)?;
        let raw = dir.join("raw.csv");
        table.write_csv(&raw)?;
        let summary_path = dir.join("ingest_summary.json");
        write_json(&summary_path, &summary)?;
        self.finish("ingest", started, &[raw, summary_path])
    }

    /// Drops rows without fare or timestamp, imputes coordinates and
    /// passenger count, filters outliers, adds engineered features, splits
    /// and fits the normalizer on training rows.
    pub fn preprocess(&self) -> Result<()> {
        self.require("preprocess", "ingest")?;
        let started = Instant::now();
        let c = &self.config;
        let dir = self.stage_dir("preprocess");
        ensure_dir(&dir)?;
        let raw = ColumnTable::read_csv(&self.stage_dir("ingest").join("raw.csv"))?;
        let fare_mask = raw.mask(FARE_AMOUNT)?;
        let time_mask = raw.mask(PICKUP_DATETIME)?;
        let keep: Vec<bool> = fare_mask.iter().zip(time_mask).map(|(a, b)| !a && !b).collect();
        let dropped_incomplete = keep.iter().filter(|k| !**k).count();
        let mut table = raw.filter_rows(&keep);
        let impute = KnnImputeConfig {
            seed: c.seed_for("impute"),
            ..c.impute
        };
        let mut imputed_counts = BTreeMap::new();
        for col in COORDINATES.iter().chain([&PASSENGER_COUNT]) {
            imputed_counts.insert(col.to_string(), table.missing_count(col)?);
            if table.missing_count(col)? > 0 {
                table = preprocess::knn_impute(&table, col, &impute)?;
            }
        }
        let pc: Vec<f64> = table.column(PASSENGER_COUNT)?.iter().map(|v| v.round().max(0.0)).collect();
        table.set_column(PASSENGER_COUNT, pc)?;
        let (mut table, removal) = preprocess::iqr_filter(&table, &[FARE_AMOUNT], &c.filter)?;
        preprocess::add_engineered_features(&mut table)?;
        let split = dataset::split_80_20(table.n_rows(), c.seed_for("split"))?;
        let mut norm_cols: Vec<&str> = FEATURE_COLUMNS.to_vec();
        norm_cols.push(FARE_AMOUNT);
        let norm = preprocess::fit_normalizer(&table.select_columns(&norm_cols)?, &split.train_rows)?;
        let clean = dir.join("clean.csv");
        table.write_csv(&clean)?;
        let split_path = dir.join("split.json");
        write_json(&split_path, &split)?;
        let norm_path = dir.join("norm_stats.json");
        write_json(&norm_path, &norm)?;
        let removal_path = self.out().join("removal_report.json");
        write_json(
            &removal_path,
            &json!({
                "dropped_missing_fare_or_timestamp": dropped_incomplete,
                "imputed_cells": imputed_counts,
                "filter": removal,
            }),
        )?;
        self.finish("preprocess", started, &[clean, split_path, norm_path, removal_path])
    }

    fn prepared(&self) -> Result<Prepared> {
        let dir = self.stage_dir("preprocess");
        Ok(Prepared {
            split: read_json(&dir.join("split.json"))?,
            norm: read_json(&dir.join("norm_stats.json"))?,
        })
    }

    /// Injects seeded Gaussian noise into the cleaned table, re-derives the
    /// distance feature and writes the KS report.
    pub fn perturb(&self) -> Result<()> {
        self.require("perturb", "preprocess")?;
        let started = Instant::now();
        let c = &self.config;
        let dir = self.stage_dir("perturb");
        ensure_dir(&dir)?;
        let clean = ColumnTable::read_csv(&self.variant_table_path(Variant::Clean))?;
        let base = c.seed_for("perturb");
        let specs: Vec<NoiseSpec> = c
            .noise
            .iter()
            .map(|s| NoiseSpec {
                seed: rng::keyed(base, s.seed),
                ..s.clone()
            })
            .collect();
        let mut noisy = perturb::inject_gaussian(&clean, &specs)?;
        preprocess::add_haversine(&mut noisy)?;
        let cols: Vec<&str> = c.noise.iter().map(|s| s.column.as_str()).collect();
        let mut report = perturb::perturbation_report(&clean, &noisy, &cols)?;
        report.noise_units = "raw units, after cleaning and before normalization".into();
        let noisy_path = dir.join("noisy.csv");
        noisy.write_csv(&noisy_path)?;
        let ks_json = self.out().join("ks_report.json");
        write_json(&ks_json, &report)?;
        let ks_csv = dir.join("ks_report.csv");
        report.write_csv(&ks_csv)?;
        self.finish("perturb", started, &[noisy_path, ks_json, ks_csv])
    }

    /// Fits the autoencoder on normalized (noisy, clean) training pairs and
    /// reconstructs every noisy row.
    pub fn denoise(&self) -> Result<()> {
        self.require("denoise", "perturb")?;
        let started = Instant::now();
        let c = &self.config;
        let dir = self.stage_dir("denoise");
        ensure_dir(&dir)?;
        let prep = self.prepared()?;
        let clean = ColumnTable::read_csv(&self.variant_table_path(Variant::Clean))?;
        let noisy = ColumnTable::read_csv(&self.variant_table_path(Variant::Noisy))?;
        let cols = c.denoise_columns();
        let norm_sub = |t: &ColumnTable| preprocess::apply_normalizer(&t.select_columns(&cols)?, &prep.norm);
        let clean_n = norm_sub(&clean)?;
        let noisy_n = norm_sub(&noisy)?;
        let train = &prep.split.train_rows;
        let cfg = TrainConfig {
            seed: c.seed_for("denoiser"),
            ..c.denoiser.train.clone()
        };
        let (model, history) = denoiser::fit_denoiser(
            &noisy_n.select_rows(train),
            &clean_n.select_rows(train),
            &c.denoiser.spec,
            &cfg,
        )?;
        let mut rebuilt = preprocess::denormalize(&denoiser::denoise(&model, &noisy_n)?, &prep.norm)?;
        // Passenger count is a count; the noisy variant rounds it too.
        let pc: Vec<f64> = rebuilt.column(PASSENGER_COUNT)?.iter().map(|v| v.round().max(0.0)).collect();
        rebuilt.set_column(PASSENGER_COUNT, pc)?;
        let mut denoised = noisy.clone();
        for col in &cols {
            denoised.set_column(col, rebuilt.column(col)?.to_vec())?;
        }
        preprocess::add_haversine(&mut denoised)?;
        let out = dir.join("denoised.csv");
        denoised.write_csv(&out)?;
        let hist = dir.join("history.csv");
        history.write_csv(&hist)?;
        let ckpt_dir = self.out().join("checkpoints");
        ensure_dir(&ckpt_dir)?;
        let stem = ckpt_dir.join("denoiser");
        nn::save_checkpoint(
            &stem,
            "denoiser",
            json!({ "spec": c.denoiser.spec, "columns": cols, "widths": model.widths() }),
            cfg.seed,
            nn::Model::params(&model),
        )?;
        let quality = dir.join("reconstruction.json");
        write_json(&quality, &reconstruction_summary(&clean_n, &noisy_n, &rebuilt_normalized(&rebuilt, &prep.norm, &cols)?, &prep.split.test_rows)?)?;
        self.finish(
            "denoise",
            started,
            &[out, hist, quality, stem.with_extension("json"), stem.with_extension("bin")],
        )
    }

    fn load_variant(&self, v: Variant) -> Result<ColumnTable> {
        ColumnTable::read_csv(&self.variant_table_path(v))
    }

    /// Trains `model` on variant `v` and stores test-set predictions. Models
    /// trained on clean data are also scored on the noisy and denoised test
    /// sets. Targets always come from the scored variant's own fare column.
    pub fn train(&self, model: &str, v: Variant) -> Result<()> {
        let stage = train_stage(model, v);
        match v {
            Variant::Noisy => self.require(&stage, "perturb")?,
            _ => self.require(&stage, "denoise")?,
        }
        let started = Instant::now();
        let dir = self.stage_dir(&stage);
        ensure_dir(&dir)?;
        let prep = self.prepared()?;
        let mut tables = BTreeMap::new();
        let scored: Vec<Variant> = if v == Variant::Clean { Variant::ALL.to_vec() } else { vec![v] };
        for s in &scored {
            tables.insert(s.as_str(), self.load_variant(*s)?);
        }
        let ckpt = self.out().join("checkpoints");
        ensure_dir(&ckpt)?;
        let (preds, artifacts) = match model {
            "gbdt" => self.train_gbdt(v, &tables, &prep, &scored, &ckpt)?,
            "gat" => self.train_gat(v, &tables, &prep, &scored, &ckpt)?,
            "tslite" => self.train_tslite(v, &tables, &prep, &scored, &ckpt)?,
            other => return Err(Error::Config(format!("unknown model `{other}`"))),
        };
        let path = dir.join("predictions.json");
        write_json(&path, &preds)?;
        let mut outputs = vec![path];
        outputs.extend(artifacts);
        self.finish(&stage, started, &outputs)
    }

    fn train_gbdt(
        &self,
        v: Variant,
        tables: &BTreeMap<&str, ColumnTable>,
        prep: &Prepared,
        scored: &[Variant],
        ckpt: &Path,
    ) -> Result<(ModelPredictions, Vec<PathBuf>)> {
        let sec = &self.config.models.gbdt;
        let table = &tables[v.as_str()];
        let (fit_rows, val_rows) = holdout(&prep.split.train_rows, sec.validation_fraction, self.config.seed_for("gbdt.validation"));
        let matrix = |t: &ColumnTable, rows: &[usize]| -> Result<FeatureMatrix> {
            let sub = t.select_rows(rows);
            FeatureMatrix::from_columns(
                FEATURE_COLUMNS
                    .iter()
                    .map(|c| sub.column(c).map(<[f64]>::to_vec))
                    .collect::<Result<_>>()?,
            )
        };
        let target = |t: &ColumnTable, rows: &[usize]| -> Result<Vec<f64>> {
            let f = t.column(FARE_AMOUNT)?;
            Ok(rows.iter().map(|&r| f[r]).collect())
        };
        let cfg = GbdtConfig {
            seed: self.config.seed_for("gbdt"),
            ..sec.config.clone()
        };
        let grid = gbdt::grid_search(
            &matrix(table, &fit_rows)?,
            &target(table, &fit_rows)?,
            &matrix(table, &val_rows)?,
            &target(table, &val_rows)?,
            &sec.depths,
            &sec.lambdas,
            &cfg,
        )?;
        let test = &prep.split.test_rows;
        let mut outputs = Vec::new();
        for s in scored {
            let t = &tables[s.as_str()];
            outputs.push(VariantOutput {
                variant: *s,
                rows: test.clone(),
                pred: grid.fit.booster.predict(&matrix(t, test)?)?,
                actual: target(t, test)?,
                variance: None,
            });
        }
        let path = ckpt.join(format!("gbdt_{v}.json"));
        grid.fit.booster.save(&path)?;
        let mut notes = BTreeMap::new();
        notes.insert("grid".into(), json!(grid.scores));
        notes.insert("best".into(), json!(grid.best));
        Ok((
            ModelPredictions {
                model: "gbdt".into(),
                trained_on: v,
                outputs,
                histories: Vec::new(),
                notes,
            },
            vec![path],
        ))
    }

    fn gat_data(&self, table: &ColumnTable, prep: &Prepared) -> Result<GatData> {
        let sec = &self.config.models.gat;
        let graph_cfg = GraphConfig {
            mode: self.config.gat_edge_mode,
            k: sec.k,
            time_window_s: sec.time_window_s,
        };
        let normalized = normalized_model_table(table, &prep.norm)?;
        let graph = gat::build_graph_split(table, &normalized, &FEATURE_COLUMNS, &graph_cfg)?;
        Ok(GatData {
            graph,
            targets: normalized.column(FARE_AMOUNT)?.to_vec(),
        })
    }

    fn train_gat(
        &self,
        v: Variant,
        tables: &BTreeMap<&str, ColumnTable>,
        prep: &Prepared,
        scored: &[Variant],
        ckpt: &Path,
    ) -> Result<(ModelPredictions, Vec<PathBuf>)> {
        let sec = &self.config.models.gat;
        let data = self.gat_data(&tables[v.as_str()], prep)?;
        let (fit_rows, val_rows) = holdout(&prep.split.train_rows, sec.validation_fraction, self.config.seed_for("gat.validation"));
        let base = self.config.seed_for("gat");
        let seeds: Vec<u64> = (0..sec.ensemble_size as u64).map(|m| rng::keyed(base, m)).collect();
        let members = gat::fit_ensemble(&data, &fit_rows, &val_rows, &sec.model, &sec.train, &seeds)?;
        let models: Vec<_> = members.iter().map(|(m, _)| m.clone()).collect();
        let fare = prep.norm.get(FARE_AMOUNT).copied().ok_or_else(|| Error::UnknownColumn(FARE_AMOUNT.into()))?;
        let scale = if fare.constant { 1.0 } else { fare.std };
        let test = &prep.split.test_rows;
        let mut outputs = Vec::new();
        for s in scored {
            let t = &tables[s.as_str()];
            let graph = if *s == v { data.graph.clone() } else { self.gat_data(t, prep)?.graph };
            let e = gat::ensemble_predict(&models, &graph, test)?;
            let f = t.column(FARE_AMOUNT)?;
            outputs.push(VariantOutput {
                variant: *s,
                rows: test.clone(),
                pred: e.mean.iter().map(|&m| preprocess::denormalize_value(m, &fare)).collect(),
                actual: test.iter().map(|&r| f[r]).collect(),
                variance: Some(e.variance.iter().map(|&x| x * scale * scale).collect()),
            });
        }
        let mut artifacts = Vec::new();
        for (i, (m, _)) in members.iter().enumerate() {
            let stem = ckpt.join(format!("gat_{v}_member{i}"));
            nn::save_checkpoint(
                &stem,
                "gat",
                json!({ "model": sec.model, "in_dim": m.in_dim, "edge_mode": self.config.gat_edge_mode.as_str() }),
                m.seed,
                nn::Model::params(m),
            )?;
            artifacts.push(stem.with_extension("json"));
            artifacts.push(stem.with_extension("bin"));
        }
        let graph_dir = self.stage_dir(&train_stage("gat", v));
        let edges = graph_dir.join("edges.csv");
        data.graph.write_edges_csv(&edges)?;
        let nodes = graph_dir.join("node_features.csv");
        data.graph.write_node_features_csv(&nodes)?;
        artifacts.push(edges);
        artifacts.push(nodes);
        let mut notes = BTreeMap::new();
        notes.insert("edge_mode".into(), json!(self.config.gat_edge_mode.as_str()));
        notes.insert("n_edges".into(), json!(data.graph.n_edges()));
        notes.insert("max_degree".into(), json!(data.graph.max_degree()));
        notes.insert("seeds".into(), json!(seeds));
        Ok((
            ModelPredictions {
                model: "gat".into(),
                trained_on: v,
                outputs,
                histories: members.into_iter().map(|(_, h)| h).collect(),
                notes,
            },
            artifacts,
        ))
    }

    fn train_tslite(
        &self,
        v: Variant,
        tables: &BTreeMap<&str, ColumnTable>,
        prep: &Prepared,
        scored: &[Variant],
        ckpt: &Path,
    ) -> Result<(ModelPredictions, Vec<PathBuf>)> {
        let sec = &self.config.models.tslite;
        let len = sec.model.window_len;
        let fare = prep.norm.get(FARE_AMOUNT).copied().ok_or_else(|| Error::UnknownColumn(FARE_AMOUNT.into()))?;
        let mut cols: Vec<&str> = FEATURE_COLUMNS.to_vec();
        cols.push(FARE_AMOUNT);
        // Sorted subsets keep their original row ids for reporting.
        let windows = |t: &ColumnTable, rows: &[usize]| -> Result<(tslite::WindowDataset, Vec<usize>)> {
            let normalized = normalized_model_table(t, &prep.norm)?;
            let mut sub = normalized.select_rows(rows);
            sub.upsert_column(PICKUP_DATETIME, t.select_rows(rows).column(PICKUP_DATETIME)?.to_vec())?;
            let (sorted, order) = tslite::sort_by_time(&sub)?;
            let w = tslite::make_windows(&sorted, &cols, FARE_AMOUNT, len)?;
            let ids = w.end_rows.iter().map(|&e| rows[order[e]]).collect();
            Ok((w, ids))
        };
        let table = &tables[v.as_str()];
        let (all_train, _) = windows(table, &prep.split.train_rows)?;
        let (train, val) = tslite::chronological_split(&all_train, sec.validation_fraction)?;
        let cfg = TrainConfig {
            seed: self.config.seed_for("tslite"),
            ..sec.train.clone()
        };
        let (model, history) = tslite::fit_tslite(&train, &val, &sec.model, &cfg)?;
        let mut outputs = Vec::new();
        for s in scored {
            let t = &tables[s.as_str()];
            let (w, ids) = windows(t, &prep.split.test_rows)?;
            let items: Vec<usize> = (0..w.len()).collect();
            let pred = model.predict(&w, &items)?;
            let f = t.column(FARE_AMOUNT)?;
            outputs.push(VariantOutput {
                variant: *s,
                pred: pred.iter().map(|&p| preprocess::denormalize_value(p, &fare)).collect(),
                actual: ids.iter().map(|&r| f[r]).collect(),
                rows: ids,
                variance: None,
            });
        }
        let stem = ckpt.join(format!("tslite_{v}"));
        nn::save_checkpoint(
            &stem,
            "tslite",
            json!({ "model": sec.model, "n_features": cols.len() }),
            cfg.seed,
            nn::Model::params(&model),
        )?;
        let mut notes = BTreeMap::new();
        notes.insert("train_windows".into(), json!(train.len()));
        notes.insert("val_windows".into(), json!(val.len()));
        Ok((
            ModelPredictions {
                model: "tslite".into(),
                trained_on: v,
                outputs,
                histories: vec![history],
                notes,
            },
            vec![stem.with_extension("json"), stem.with_extension("bin")],
        ))
    }

    fn load_predictions(&self, model: &str, v: Variant) -> Result<ModelPredictions> {
        let stage = train_stage(model, v);
        self.require("evaluate", &stage)?;
        read_json(&self.stage_dir(&stage).join("predictions.json"))
    }

    /// Writes in-distribution reports for every (model, variant) and the OOD
    /// comparison for every clean-trained model.
    pub fn evaluate(&self) -> Result<()> {
        let started = Instant::now();
        let cfg = &self.config.eval;
        let eval_dir = self.out().join("eval");
        let plots = self.out().join("plots");
        ensure_dir(&eval_dir)?;
        ensure_dir(&plots)?;
        ensure_dir(&self.stage_dir("evaluate"))?;
        let mut outputs = Vec::new();
        for model in self.config.models.enabled() {
            let mut clean_trained = None;
            for v in Variant::ALL {
                let preds = self.load_predictions(model, v)?;
                let o = preds
                    .on(v)
                    .ok_or_else(|| Error::Contract(format!("{model} trained on {v} has no {v} predictions")))?;
                let label = ReportLabel {
                    model: model.into(),
                    trained_on: v,
                    dataset_variant: v,
                };
                let report = eval::evaluate(&label, &o.pred, &o.actual, o.variance.as_deref(), cfg)?;
                outputs.extend(self.write_report(&report, o, &eval_dir, &plots)?);
                if v == Variant::Clean {
                    clean_trained = Some(preds);
                }
            }
            let preds = clean_trained.expect("clean variant visited");
            let side = |v: Variant| -> Result<VariantPredictions<'_>> {
                let o = preds
                    .on(v)
                    .ok_or_else(|| Error::Contract(format!("clean-trained {model} has no {v} predictions")))?;
                Ok(VariantPredictions {
                    pred: &o.pred,
                    actual: &o.actual,
                    variance: o.variance.as_deref(),
                })
            };
            let ood = eval::ood_protocol(model, side(Variant::Clean)?, side(Variant::Noisy)?, side(Variant::Denoised)?, cfg)?;
            for (r, v) in ood.reports.iter().zip(Variant::ALL).skip(1) {
                let o = preds.on(v).expect("checked above");
                outputs.extend(self.write_report(r, o, &eval_dir, &plots)?);
            }
            let path = eval_dir.join(format!("ood_{model}.json"));
            write_json(&path, &ood)?;
            outputs.push(path);
        }
        self.finish("evaluate", started, &outputs)
    }

    fn write_report(&self, r: &EvalReport, o: &VariantOutput, eval_dir: &Path, plots: &Path) -> Result<Vec<PathBuf>> {
        let tag = match r.protocol {
            eval::Protocol::InDistribution => format!("{}_{}", r.model, r.dataset_variant),
            eval::Protocol::Ood => format!("{}_{}_on_{}", r.model, r.trained_on, r.dataset_variant),
        };
        let json_path = eval_dir.join(format!("{tag}.json"));
        write_json(&json_path, r)?;
        let cal = plots.join(format!("calibration_{tag}.csv"));
        eval::write_calibration_csv(r, &cal)?;
        let bins = plots.join(format!("bin_mae_{tag}.csv"));
        eval::write_bin_mae_csv(r, &bins)?;
        let mut out = vec![json_path, cal, bins];
        if let Some(var) = &o.variance {
            let unc = plots.join(format!("uncertainty_{tag}.csv"));
            eval::write_uncertainty_csv(&o.pred, var, &o.actual, &unc)?;
            out.push(unc);
        }
        Ok(out)
    }

    /// Regenerates the comparison tables from stored reports.
    pub fn report(&self) -> Result<PathBuf> {
        self.require("report", "evaluate")?;
        let eval_dir = self.out().join("eval");
        let mut reports = Vec::new();
        let mut oods = Vec::new();
        for model in self.config.models.enabled() {
            for v in Variant::ALL {
                reports.push(read_json::<EvalReport>(&eval_dir.join(format!("{model}_{v}.json")))?);
            }
            oods.push(read_json::<OodComparison>(&eval_dir.join(format!("ood_{model}.json")))?);
        }
        let path = self.out().join("comparison.csv");
        write_text(&path, &eval::comparison_csv(&reports))?;
        write_text(&self.out().join("ood_comparison.csv"), &eval::ood_comparison_csv(&oods))?;
        Ok(path)
    }

    /// Runs every stage whose cache is stale, then the report. The manifest
    /// is written even when a stage fails.
    pub fn run_all(&self) -> Result<RunManifest> {
        ensure_dir(self.out())?;
        let result = self.run_stages();
        let manifest = self.manifest(result.as_ref().err().map(|e| e.to_string()))?;
        write_json(&self.out().join("manifest.json"), &manifest)?;
        result.map(|_| manifest)
    }

    fn run_stages(&self) -> Result<()> {
        let steps: [(&str, fn(&Self) -> Result<()>); 4] = [
            ("ingest", Self::ingest),
            ("preprocess", Self::preprocess),
            ("perturb", Self::perturb),
            ("denoise", Self::denoise),
        ];
        for (name, f) in steps {
            if !self.is_cached(name)? {
                f(self).map_err(|e| stage_error(name, e))?;
            }
        }
        for model in self.config.models.enabled() {
            for v in Variant::ALL {
                let stage = train_stage(model, v);
                if !self.is_cached(&stage)? {
                    self.train(model, v).map_err(|e| stage_error(&stage, e))?;
                }
            }
        }
        if !self.is_cached("evaluate")? {
            self.evaluate().map_err(|e| stage_error("evaluate", e))?;
        }
        self.report().map_err(|e| stage_error("report", e))?;
        Ok(())
    }

    /// Snapshot of config, completed stages, hashed outputs and lineage.
    pub fn manifest(&self, error: Option<String>) -> Result<RunManifest> {
        let mut names: Vec<String> = STAGES.iter().map(|s| s.to_string()).collect();
        for m in self.config.models.enabled() {
            for v in Variant::ALL {
                names.push(train_stage(m, v));
            }
        }
        names.push("evaluate".into());
        let mut stages = Vec::new();
        let mut artifacts = Vec::new();
        for name in names {
            let meta_path = self.stage_dir(&name).join("stage.json");
            if !meta_path.exists() {
                continue;
            }
            let meta: StageMeta = read_json(&meta_path)?;
            for o in &meta.outputs {
                let p = self.out().join(o);
                if p.exists() {
                    artifacts.push(ArtifactRecord {
                        path: o.clone(),
                        sha256: file_sha256(&p)?,
                    });
                }
            }
            stages.push(meta);
        }
        for extra in ["comparison.csv", "ood_comparison.csv"] {
            let p = self.out().join(extra);
            if p.exists() {
                artifacts.push(ArtifactRecord {
                    path: extra.into(),
                    sha256: file_sha256(&p)?,
                });
            }
        }
        let mut versions = BTreeMap::new();
        versions.insert("farebench".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("report_format".into(), "1".into());
        versions.insert("checkpoint_format".into(), "1".into());
        let models = self
            .config
            .models
            .enabled()
            .iter()
            .flat_map(|m| {
                Variant::ALL.iter().map(move |&v| ModelLineage {
                    model: m.to_string(),
                    trained_on: v,
                    evaluated_on: if v == Variant::Clean { Variant::ALL.to_vec() } else { vec![v] },
                })
            })
            .collect();
        Ok(RunManifest {
            config: self.config.clone(),
            versions,
            stages,
            artifacts,
            variants: vec![
                LineageEdge {
                    variant: Variant::Clean,
                    derived_from: None,
                    stage: "preprocess".into(),
                },
                LineageEdge {
                    variant: Variant::Noisy,
                    derived_from: Some(Variant::Clean),
                    stage: "perturb".into(),
                },
                LineageEdge {
                    variant: Variant::Denoised,
                    derived_from: Some(Variant::Noisy),
                    stage: "denoise".into(),
                },
            ],
            models,
            error,
        })
    }
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("stage {stage}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("stage {stage}: {m}")),
        Error::Data(m) => Error::Data(format!("stage {stage}: {m}")),
        other => other,
    }
}

pub fn train_stage(model: &str, v: Variant) -> String {
    format!("train_{model}_{v}")
}

fn parse_train_stage(stage: &str) -> Result<(&str, Variant)> {
    let rest = stage.strip_prefix("train_").unwrap_or(stage);
    let (model, variant) = rest
        .split_once('_')
        .ok_or_else(|| Error::Config(format!("bad train stage `{stage}`")))?;
    Ok((model, variant.parse()?))
}

/// The subcommand that produces a stage's cache.
fn command_for(stage: &str) -> &str {
    if stage.starts_with("train_") {
        "train"
    } else {
        stage
    }
}

/// Seeded split of `rows` into (fit, validation).
fn holdout(rows: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(&mut rng::rng_from(seed));
    let n_val = ((rows.len() as f64 * fraction).round() as usize).clamp(1, rows.len().saturating_sub(1).max(1));
    let fit = shuffled.split_off(n_val);
    (fit, shuffled)
}

fn normalized_model_table(table: &ColumnTable, norm: &NormStats) -> Result<ColumnTable> {
    let mut cols: Vec<&str> = FEATURE_COLUMNS.to_vec();
    cols.push(FARE_AMOUNT);
    preprocess::apply_normalizer(&table.select_columns(&cols)?, norm)
}

fn rebuilt_normalized(rebuilt: &ColumnTable, norm: &NormStats, cols: &[&str]) -> Result<ColumnTable> {
    preprocess::apply_normalizer(&rebuilt.select_columns(cols)?, norm)
}

/// Mean squared distance to the clean rows over the test split, before and
/// after denoising, in normalized units.
fn reconstruction_summary(
    clean: &ColumnTable,
    noisy: &ColumnTable,
    denoised: &ColumnTable,
    rows: &[usize],
) -> Result<Value> {
    let mse = |t: &ColumnTable| -> Result<f64> {
        let mut s = 0.0;
        let mut n = 0usize;
        for name in clean.names() {
            let (a, b) = (clean.column(name)?, t.column(name)?);
            for &r in rows {
                s += (a[r] - b[r]).powi(2);
                n += 1;
            }
        }
        Ok(s / n.max(1) as f64)
    };
    let (before, after) = (mse(noisy)?, mse(denoised)?);
    Ok(json!({
        "split": "test",
        "mse_noisy_vs_clean": before,
        "mse_denoised_vs_clean": after,
        "ratio": if before > 0.0 { Some(after / before) } else { None },
    }))
}

/// Convenience for tests and tools: a `rows x cols` matrix of model inputs.
pub fn feature_tensor(table: &ColumnTable, rows: &[usize]) -> Result<Tensor2> {
    let sub = table.select_rows(rows);
    Ok(Tensor2::new(rows.len(), FEATURE_COLUMNS.len(), sub.row_major(&FEATURE_COLUMNS)?)?)
}
