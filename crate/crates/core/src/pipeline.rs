//! End-to-end runs: configuration, per-seed stage execution over a cached run
//! directory, the run manifest, and the comparison-size and discrepancy studies.
//!
//! A run directory looks like
//!
//! ```text
//! out/
//!   manifest.json
//!   seed-0/
//!     stages.json            stage -> cache key
//!     data/{train,comparison,validation,test}.bin
//!     erm.gicm
//!     comparison.json        sampled comparison indices (sampled sources only)
//!     gic.gicm, gic.json, gic_curves.csv, grid.csv
//!     groups.csv
//!     robust.gicm, robust_curve.csv
//!     report.json, erm_report.json, boundaries.svg
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comparison::{build_comparison_rounds, readjust_indices, ComparisonPlan, ComparisonSource};
use crate::data::{
    gen_synth_spurious, gen_toy2d, load_dataset, save_dataset, DataFormat, LabeledDataset, SynthSpuriousSpec, Toy2dSpec,
};
use crate::erm::{extract_features, train_erm, ErmArtifacts, Extractor};
use crate::error::{GicError, Result};
use crate::eval::{evaluate_model, minority_precision_recall, plot_boundary_2d, BoundaryModel, EvalReport, GroupAccuracy, PrecisionRecall};
use crate::gic::{
    grid_search, infer_groups, infer_spurious, train_gic, write_curves, write_grid, GicArtifacts, GicConfig,
    DEFAULT_GAMMA_GRID, DEFAULT_TAU,
};
use crate::invariant::{train_robust, GroupAssignment, RobustMethod, RobustTrainConfig};
use crate::kl::{kl_discrete, TermMode};
use crate::nn::{argmax_rows, FitConfig, MlpModel, SgdParams};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// The four-Gaussian toy; the validation split doubles as comparison data.
    Toy2d {
        #[serde(default)]
        spec: Toy2dSpec,
    },
    /// Spurious-feature surrogate; the comparison split doubles as validation.
    Synth { spec: SynthSpuriousSpec },
    /// Dataset files (`.csv` or `.bin`); validation defaults to the comparison file.
    Files {
        train: PathBuf,
        comparison: PathBuf,
        test: PathBuf,
        #[serde(default)]
        validation: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    Identity,
    /// Penultimate layer of the stage-1 ERM network.
    TrainedExtractor,
}

impl PhiMode {
    fn extractor(self) -> Extractor {
        match self {
            PhiMode::Identity => Extractor::Identity,
            PhiMode::TrainedExtractor => Extractor::Penultimate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErmStageConfig {
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
}

impl Default for ErmStageConfig {
    fn default() -> Self {
        ErmStageConfig {
            hidden: Vec::new(),
            fit: FitConfig {
                epochs: 20,
                batch_size: Some(32),
                sgd: SgdParams::new(1e-3, 0.9, 1e-4),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSource {
    Gic,
    /// Oracle training groups; stage 2 is skipped.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub gammas: Vec<f64>,
    pub ks: Vec<usize>,
    pub tau: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            gammas: DEFAULT_GAMMA_GRID.to_vec(),
            ks: crate::gic::default_k_grid(),
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Defaults to the smallest half of the oracle training groups.
    pub minority_groups: Option<Vec<usize>>,
    /// Write `boundaries.svg` (toy data only).
    pub plot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    pub comparison: ComparisonPlan,
    pub phi: PhiMode,
    pub erm: ErmStageConfig,
    /// `gic.mode` follows `comparison.labeled`; `gic.seed` follows the run seed.
    pub gic: GicConfig,
    /// Select `(gamma, K)` by grid search instead of using `gic` as is.
    pub grid_search: Option<GridConfig>,
    pub groups: GroupSource,
    /// Upsample the two smallest inferred comparison groups and retrain GIC.
    pub readjust: bool,
    pub robust: RobustTrainConfig,
    pub eval: EvalOptions,
    /// Seeds are `base_seed + i` for `i < num_seeds`.
    pub base_seed: u64,
    pub num_seeds: usize,
    /// Seeds run concurrently in this many worker threads.
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy2d()
    }
}

impl PipelineConfig {
    /// Linear models on the toy data, labeled validation as comparison, Subsample.
    pub fn toy2d() -> Self {
        PipelineConfig {
            dataset: DatasetSource::Toy2d {
                spec: Toy2dSpec::default(),
            },
            comparison: ComparisonPlan::default(),
            phi: PhiMode::Identity,
            erm: ErmStageConfig::default(),
            gic: GicConfig::default(),
            grid_search: None,
            groups: GroupSource::Gic,
            readjust: false,
            robust: RobustTrainConfig::default(),
            eval: EvalOptions {
                plot: true,
                ..EvalOptions::default()
            },
            base_seed: 0,
            num_seeds: 3,
            workers: 1,
            output_dir: PathBuf::from("runs/toy2d"),
        }
    }

    /// Colored-digit surrogate with selective mixup downstream.
    pub fn cmnist() -> Self {
        PipelineConfig {
            dataset: DatasetSource::Synth {
                spec: SynthSpuriousSpec::cmnist(),
            },
            erm: ErmStageConfig {
                hidden: Vec::new(),
                fit: FitConfig {
                    epochs: 10,
                    batch_size: Some(64),
                    sgd: SgdParams::new(1e-2, 0.9, 1e-4),
                },
            },
            gic: GicConfig {
                lr: 0.05,
                ..GicConfig::default()
            },
            robust: RobustTrainConfig {
                method: RobustMethod::Mixup,
                epochs: 20,
                ..RobustTrainConfig::default()
            },
            output_dir: PathBuf::from("runs/cmnist"),
            ..Self::toy2d()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy2d" => Ok(Self::toy2d()),
            "cmnist" => Ok(Self::cmnist()),
            other => Err(GicError::Config(format!("unknown preset `{other}` (expected toy2d or cmnist)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GicError::Config(format!("invalid pipeline config: {e}")))
    }

    /// Reads a TOML config, or the `config` echo of a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            let manifest: Manifest = serde_json::from_str(&text)?;
            return Ok(manifest.config);
        }
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GicError::Config(format!("cannot serialize config: {e}")))
    }

    /// Applies `dotted.key=value` overrides; values are TOML literals, and
    /// anything that does not parse as one is taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| GicError::Config(format!("cannot serialize config: {e}")))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| GicError::Config(format!("override `{item}` is not of the form key=value")))?;
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").unwrap(),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            set_dotted(&mut root, key.trim(), value)?;
        }
        root.try_into().map_err(|e| GicError::Config(format!("invalid override: {e}")))
    }

    /// Copy with derived fields filled in (`gic.mode` from `comparison.labeled`).
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.gic.mode = if c.comparison.labeled { TermMode::Labeled } else { TermMode::Unlabeled };
        c
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.base_seed + i).collect()
    }

    fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.effective();
        c.gic.seed = seed;
        c.robust.seed = seed;
        c.comparison.seed = seed;
        c
    }

    /// Every sub-config is checked before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let c = self.effective();
        if c.num_seeds == 0 {
            return Err(GicError::Config("num_seeds must be at least 1".into()));
        }
        if c.workers == 0 {
            return Err(GicError::Config("workers must be at least 1".into()));
        }
        match &c.dataset {
            DatasetSource::Toy2d { spec } => {
                if spec.groups.iter().any(|g| g.label > 1 || g.spurious > 1 || g.mean.iter().any(|m| !m.is_finite())) {
                    return Err(GicError::Config("toy groups need binary label/attribute and finite means".into()));
                }
            }
            DatasetSource::Synth { spec } => spec.validate().map_err(|e| GicError::Config(e.to_string()))?,
            DatasetSource::Files { .. } => {}
        }
        c.comparison.validate()?;
        c.erm.fit.sgd.validate()?;
        if c.erm.fit.batch_size == Some(0) {
            return Err(GicError::Config("erm batch size must be positive".into()));
        }
        if c.phi == PhiMode::TrainedExtractor && c.erm.hidden.is_empty() {
            return Err(GicError::Config("a trained extractor needs at least one hidden ERM layer".into()));
        }
        c.gic.validate()?;
        if let Some(grid) = &c.grid_search {
            if grid.gammas.is_empty() || grid.ks.is_empty() || grid.ks.contains(&0) {
                return Err(GicError::Config("grid search needs non-empty gamma and positive K grids".into()));
            }
        }
        if c.readjust && c.groups == GroupSource::Oracle {
            return Err(GicError::Config("readjustment needs GIC-inferred groups".into()));
        }
        c.robust.validate()?;
        Ok(())
    }

    /// Identifies the experiment; where it is written and how many workers run it do not count.
    fn hash(&self) -> Result<String> {
        let mut c = self.effective();
        c.output_dir = PathBuf::new();
        c.workers = 1;
        Ok(hex_digest(&[&serde_json::to_vec(&c)?]))
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(GicError::Config(format!("malformed override key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| GicError::Config(format!("override key `{key}` descends into a non-table")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| GicError::Config(format!("override key `{key}` descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub comparison: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

const DATA_FILES: [&str; 4] = ["data/train.bin", "data/comparison.bin", "data/validation.bin", "data/test.bin"];

impl PreparedData {
    fn save(&self, dir: &Path) -> Result<()> {
        for (d, f) in [&self.train, &self.comparison, &self.validation, &self.test].into_iter().zip(DATA_FILES) {
            save_dataset(d, &dir.join(f), DataFormat::Bin)?;
        }
        Ok(())
    }

    fn load(dir: &Path) -> Result<Self> {
        let l = |f: &str| load_dataset(&dir.join(f), DataFormat::Bin);
        Ok(PreparedData {
            train: l(DATA_FILES[0])?.renamed("train"),
            comparison: l(DATA_FILES[1])?.renamed("comparison"),
            validation: l(DATA_FILES[2])?.renamed("validation"),
            test: l(DATA_FILES[3])?.renamed("test"),
        })
    }
}

pub fn prepare_data(source: &DatasetSource, seed: u64) -> Result<PreparedData> {
    match source {
        DatasetSource::Toy2d { spec } => {
            let (train, val, test) = gen_toy2d(spec, seed)?;
            Ok(PreparedData {
                comparison: val.clone().renamed("comparison"),
                validation: val,
                train,
                test,
            })
        }
        DatasetSource::Synth { spec } => {
            let s = gen_synth_spurious(spec, seed)?;
            Ok(PreparedData {
                train: s.train.data,
                validation: s.comparison.data.clone().renamed("validation"),
                comparison: s.comparison.data,
                test: s.test.data,
            })
        }
        DatasetSource::Files {
            train,
            comparison,
            test,
            validation,
        } => {
            let l = |p: &Path| load_dataset(p, DataFormat::from_path(p));
            let comparison = l(comparison)?;
            Ok(PreparedData {
                train: l(train)?,
                validation: match validation {
                    Some(p) => l(p)?,
                    None => comparison.clone(),
                },
                comparison,
                test: l(test)?,
            })
        }
    }
}

/// Cache keys of completed stages, persisted as `stages.json` in a seed directory.
struct StageCache {
    dir: PathBuf,
    force: bool,
    keys: BTreeMap<String, String>,
}

impl StageCache {
    fn open(dir: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("stages.json");
        let keys = if path.exists() && !force {
            serde_json::from_slice(&fs::read(&path)?).unwrap_or_default()
        } else {
            BTreeMap::new()
        };
        Ok(StageCache {
            dir: dir.to_path_buf(),
            force,
            keys,
        })
    }

    fn hit(&self, stage: &str, key: &str, files: &[&str]) -> bool {
        !self.force && self.keys.get(stage).is_some_and(|k| k == key) && files.iter().all(|f| self.dir.join(f).exists())
    }

    fn commit(&mut self, stage: &str, key: &str) -> Result<()> {
        self.keys.insert(stage.to_string(), key.to_string());
        fs::write(self.dir.join("stages.json"), serde_json::to_string_pretty(&self.keys)? + "\n")?;
        Ok(())
    }
}

/// Runs `compute` unless the cache holds this stage under `key`; artifacts
/// are written only after a successful computation.
fn stage<T>(
    cache: &mut Option<StageCache>,
    name: &'static str,
    key: &str,
    files: &[&str],
    compute: impl FnOnce() -> Result<T>,
    save: impl FnOnce(&T, &Path) -> Result<()>,
    load: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    let run = || -> Result<T> {
        match cache {
            None => compute(),
            Some(c) if c.hit(name, key, files) => {
                log::info!("stage {name}: cached ({})", c.dir.display());
                load(&c.dir)
            }
            Some(c) => {
                log::info!("stage {name}: running ({})", c.dir.display());
                let value = compute()?;
                save(&value, &c.dir)?;
                c.commit(name, key)?;
                Ok(value)
            }
        }
    };
    run().map_err(|e| e.in_stage(name))
}

/// Everything one seed produced that later consumers read.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub erm: GroupAccuracy,
    pub robust: GroupAccuracy,
    pub groups: GroupAssignment,
    /// Agreement of the inferred attribute with the oracle attribute on the
    /// training set, maximized over relabelings of the attribute ids.
    pub spurious_accuracy: Option<f64>,
    pub precision_recall: Option<PrecisionRecall>,
    /// Final spurious-term estimate of the GIC head.
    pub spurious_term: Option<f64>,
    pub erm_model: MlpModel,
    pub robust_model: MlpModel,
    pub gic: Option<GicArtifacts>,
    pub warnings: Vec<String>,
    /// Stage name -> cache key (empty for in-memory runs).
    pub stage_keys: BTreeMap<String, String>,
    /// Artifact name -> path relative to the seed directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ComparisonRecord {
    comparison_indices: Option<Vec<usize>>,
    remaining_indices: Option<Vec<usize>>,
    warnings: Vec<String>,
}

/// Inputs handed to the GIC stage.
struct GicInputs {
    train: LabeledDataset,
    comparison: LabeledDataset,
    /// Raw comparison rows, for ERM pseudo-classes in unlabeled readjustment.
    comparison_raw: LabeledDataset,
    warnings: Vec<String>,
}

fn gic_inputs(cfg: &PipelineConfig, data: &PreparedData, erm: &ErmArtifacts, rec: &ComparisonRecord) -> Result<GicInputs> {
    let mode = cfg.phi.extractor();
    let z_train = extract_features(erm, &data.train, mode)?;
    let (train, comparison, comparison_raw) = match (&rec.comparison_indices, &rec.remaining_indices) {
        (Some(c), Some(r)) => (z_train.subset(r)?, z_train.subset(c)?, data.train.subset(c)?),
        _ => (z_train, extract_features(erm, &data.comparison, mode)?, data.comparison.clone()),
    };
    let comparison = if cfg.comparison.labeled { comparison } else { comparison.without_labels() };
    Ok(GicInputs {
        train,
        comparison,
        comparison_raw,
        warnings: rec.warnings.clone(),
    })
}

fn build_comparison(cfg: &PipelineConfig, data: &PreparedData, erm: &ErmArtifacts) -> Result<ComparisonRecord> {
    match cfg.comparison.source {
        ComparisonSource::Provided => Ok(ComparisonRecord::default()),
        ComparisonSource::SampledFromTrain => {
            let z = extract_features(erm, &data.train, cfg.phi.extractor())?;
            let rounds = build_comparison_rounds(&data.train, &z, &erm.model, &cfg.comparison, &cfg.gic)?;
            let last = rounds.last().unwrap();
            Ok(ComparisonRecord {
                comparison_indices: Some(last.comparison_indices.clone()),
                remaining_indices: Some(last.remaining_indices.clone()),
                warnings: rounds.iter().flat_map(|r| r.warnings.clone()).collect(),
            })
        }
    }
}

struct GicStage {
    art: GicArtifacts,
    grid: Option<Vec<crate::gic::GridPoint>>,
}

fn run_gic(cfg: &PipelineConfig, inputs: &GicInputs, erm: &ErmArtifacts, seed: u64) -> Result<GicStage> {
    let mut gcfg = cfg.gic.clone();
    let mut grid_points = None;
    if let Some(grid) = &cfg.grid_search {
        let res = grid_search(&inputs.train, &inputs.comparison, &gcfg, &grid.gammas, &grid.ks, grid.tau)?;
        gcfg.seed = rng::derive_seed(gcfg.seed, &format!("grid/{}/{}", res.gamma, res.epochs));
        gcfg.gamma = res.gamma;
        gcfg.epochs = res.epochs;
        grid_points = Some(res.points);
    }
    let mut art = train_gic(&inputs.train, &inputs.comparison, &gcfg)?;
    if cfg.readjust {
        let groups = if cfg.comparison.labeled {
            infer_groups(&art, &inputs.comparison)?
        } else {
            let pseudo = argmax_rows(&erm.model.forward(inputs.comparison_raw.features())?);
            let (hard, probs) = infer_spurious(&art, &inputs.comparison)?;
            GroupAssignment::from_hard(pseudo, hard, probs, inputs.train.num_classes())?
        };
        let idx = readjust_indices(&groups, rng::derive_seed(seed, "pipeline/readjust"))?;
        art = train_gic(&inputs.train, &inputs.comparison.subset(&idx)?, &gcfg)?;
    }
    Ok(GicStage { art, grid: grid_points })
}

fn write_robust_curve(out: &crate::invariant::RobustOutcome, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "loss", "accuracy", "val_worst"]).map_err(csv_err)?;
    for (i, e) in out.train_curve.iter().enumerate() {
        let val = out.val_worst_curve.get(i).map_or(String::new(), |v| v.to_string());
        w.write_record([e.epoch.to_string(), e.loss.to_string(), e.accuracy.to_string(), val]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> GicError {
    GicError::Input(format!("csv: {e}"))
}

/// Best agreement over all relabelings of the predicted attribute ids.
pub fn attribute_accuracy(predicted: &[usize], oracle: &[usize], num_spurious: usize) -> Result<f64> {
    if predicted.len() != oracle.len() || predicted.is_empty() {
        return Err(GicError::Shape(format!("{} predictions for {} oracle labels", predicted.len(), oracle.len())));
    }
    let mut confusion = vec![vec![0usize; num_spurious]; num_spurious];
    for (&p, &o) in predicted.iter().zip(oracle) {
        if p >= num_spurious || o >= num_spurious {
            return Err(GicError::Index {
                index: p.max(o),
                len: num_spurious,
            });
        }
        confusion[p][o] += 1;
    }
    let mut perm: Vec<usize> = (0..num_spurious).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        best = best.max((0..num_spurious).map(|i| confusion[i][p[i]]).sum::<usize>());
    });
    Ok(best as f64 / predicted.len() as f64)
}

fn permute(v: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

/// Precomputed pieces a study can share across the runs of one seed.
#[derive(Default)]
struct Shared {
    data: Option<PreparedData>,
    erm: Option<ErmArtifacts>,
}

fn execute(cfg: &PipelineConfig, seed: u64, shared: Shared, dir: Option<&Path>, force: bool) -> Result<SeedOutcome> {
    let cfg = cfg.for_seed(seed);
    let mut cache = dir.map(|d| StageCache::open(d, force)).transpose()?;
    let mut keys = BTreeMap::new();
    let mut artifacts = BTreeMap::new();

    let mut data_parts = vec![json(&cfg.dataset)?, seed.to_le_bytes().to_vec()];
    if let DatasetSource::Files {
        train,
        comparison,
        test,
        validation,
    } = &cfg.dataset
    {
        for p in [Some(train), Some(comparison), Some(test), validation.as_ref()].into_iter().flatten() {
            data_parts.push(fs::read(p).map_err(|e| GicError::Io(e).in_stage("data"))?);
        }
    }
    let data_key = hex_digest(&data_parts.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let data = match shared.data {
        Some(d) => d,
        None => stage(
            &mut cache,
            "data",
            &data_key,
            &DATA_FILES,
            || prepare_data(&cfg.dataset, seed),
            |d, dir| d.save(dir),
            PreparedData::load,
        )?,
    };
    keys.insert("data".to_string(), data_key.clone());
    for f in DATA_FILES {
        artifacts.insert(f.trim_start_matches("data/").trim_end_matches(".bin").to_string() + "_data", f.to_string());
    }

    let erm_key = hex_digest(&[b"erm", data_key.as_bytes(), &json(&cfg.erm)?]);
    let erm = match shared.erm {
        Some(e) => e,
        None => stage(
            &mut cache,
            "erm",
            &erm_key,
            &["erm.gicm"],
            || {
                let mut arch = vec![data.train.dim()];
                arch.extend(&cfg.erm.hidden);
                arch.push(data.train.num_classes());
                train_erm(&data.train, &arch, &cfg.erm.fit, seed)
            },
            |e, dir| e.model.save(&dir.join("erm.gicm")),
            |dir| Ok(ErmArtifacts::from_model(MlpModel::load(&dir.join("erm.gicm"))?)),
        )?,
    };
    keys.insert("erm".to_string(), erm_key.clone());
    artifacts.insert("erm_model".into(), "erm.gicm".into());

    let mut warnings = Vec::new();
    let (groups, gic, groups_key) = match cfg.groups {
        GroupSource::Oracle => {
            let key = hex_digest(&[b"groups/oracle", data_key.as_bytes()]);
            let groups = stage(
                &mut cache,
                "groups",
                &key,
                &["groups.csv"],
                || {
                    let y = data.train.require_labels()?;
                    let a = data.train.require_spurious()?;
                    GroupAssignment::oracle(y, a, data.train.num_classes(), data.train.num_spurious())
                },
                |g, dir| g.save_csv(&dir.join("groups.csv")),
                |dir| GroupAssignment::load_csv(&dir.join("groups.csv"), data.train.num_classes()),
            )?;
            (groups, None, key)
        }
        GroupSource::Gic => {
            let boosting = cfg.comparison.source == ComparisonSource::SampledFromTrain && cfg.comparison.boosting_rounds > 0;
            let cmp_key = hex_digest(&[
                b"comparison",
                erm_key.as_bytes(),
                &json(&cfg.comparison)?,
                &json(&cfg.phi)?,
                &if boosting { json(&cfg.gic)? } else { Vec::new() },
            ]);
            let record = stage(
                &mut cache,
                "comparison",
                &cmp_key,
                &["comparison.json"],
                || build_comparison(&cfg, &data, &erm),
                |r, dir| Ok(fs::write(dir.join("comparison.json"), serde_json::to_string(r)? + "\n")?),
                |dir| Ok(serde_json::from_slice(&fs::read(dir.join("comparison.json"))?)?),
            )?;
            keys.insert("comparison".to_string(), cmp_key.clone());
            artifacts.insert("comparison_indices".into(), "comparison.json".into());
            let inputs = gic_inputs(&cfg, &data, &erm, &record).map_err(|e| e.in_stage("comparison"))?;
            warnings.extend(inputs.warnings.iter().cloned());

            let gic_key = hex_digest(&[
                b"gic",
                cmp_key.as_bytes(),
                &json(&cfg.gic)?,
                &json(&cfg.grid_search)?,
                &[u8::from(cfg.readjust)],
            ]);
            let gic_stage = stage(
                &mut cache,
                "gic",
                &gic_key,
                &["gic.gicm", "gic.json"],
                || run_gic(&cfg, &inputs, &erm, seed),
                |g, dir| {
                    g.art.save(&dir.join("gic.gicm"))?;
                    write_curves(&g.art.curves, &dir.join("gic_curves.csv"))?;
                    if let Some(points) = &g.grid {
                        write_grid(points, &dir.join("grid.csv"))?;
                    }
                    Ok(())
                },
                |dir| {
                    Ok(GicStage {
                        art: GicArtifacts::load(&dir.join("gic.gicm"))?,
                        grid: None,
                    })
                },
            )?;
            keys.insert("gic".to_string(), gic_key.clone());
            artifacts.insert("gic_model".into(), "gic.gicm".into());
            artifacts.insert("gic_curves".into(), "gic_curves.csv".into());
            if cfg.grid_search.is_some() {
                artifacts.insert("grid".into(), "grid.csv".into());
            }

            let z_train = extract_features(&erm, &data.train, cfg.phi.extractor()).map_err(|e| e.in_stage("groups"))?;
            let key = hex_digest(&[b"groups/gic", gic_key.as_bytes()]);
            let groups = stage(
                &mut cache,
                "groups",
                &key,
                &["groups.csv"],
                || infer_groups(&gic_stage.art, &z_train),
                |g, dir| g.save_csv(&dir.join("groups.csv")),
                |dir| GroupAssignment::load_csv(&dir.join("groups.csv"), data.train.num_classes()),
            )?;
            (groups, Some(gic_stage.art), key)
        }
    };
    keys.insert("groups".to_string(), groups_key.clone());
    artifacts.insert("groups".into(), "groups.csv".into());

    let robust_key = hex_digest(&[b"robust", groups_key.as_bytes(), data_key.as_bytes(), &json(&cfg.robust)?]);
    let robust_model = stage(
        &mut cache,
        "robust",
        &robust_key,
        &["robust.gicm"],
        || train_robust(&data.train, &groups, &cfg.robust, Some(&data.validation)),
        |out, dir| {
            out.model.save(&dir.join("robust.gicm"))?;
            write_robust_curve(out, &dir.join("robust_curve.csv"))
        },
        |dir| {
            Ok(crate::invariant::RobustOutcome {
                model: MlpModel::load(&dir.join("robust.gicm"))?,
                train_curve: Vec::new(),
                val_worst_curve: Vec::new(),
                selected_epoch: 0,
                q_curve: Vec::new(),
                active_groups: Vec::new(),
            })
        },
    )?
    .model;
    keys.insert("robust".to_string(), robust_key);
    artifacts.insert("robust_model".into(), "robust.gicm".into());

    let evaluated = (|| -> Result<_> {
        let erm_acc = evaluate_model(&erm.model, &data.test)?;
        let robust_acc = evaluate_model(&robust_model, &data.test)?;
        let (spurious_accuracy, pr) = match data.train.group_ids() {
            Some(oracle) => {
                let acc = attribute_accuracy(&groups.spurious_hard, data.train.require_spurious()?, groups.num_spurious)?;
                let pr = minority_precision_recall(&groups.group_id, &oracle, groups.num_groups(), cfg.eval.minority_groups.as_deref())?;
                (Some(acc), Some(pr))
            }
            None => (None, None),
        };
        Ok((erm_acc, robust_acc, spurious_accuracy, pr))
    })()
    .map_err(|e| e.in_stage("evaluate"))?;
    let (erm_acc, robust_acc, spurious_accuracy, pr) = evaluated;

    if let Some(c) = &cache {
        let echo = serde_json::to_value(&cfg)?;
        let mut report = EvalReport::new(&robust_acc, pr.as_ref(), echo.clone(), seed);
        report.warnings.extend(warnings.iter().cloned());
        report.emit(&c.dir.join("report.json")).map_err(|e| e.in_stage("evaluate"))?;
        EvalReport::new(&erm_acc, None, echo, seed)
            .emit(&c.dir.join("erm_report.json"))
            .map_err(|e| e.in_stage("evaluate"))?;
        artifacts.insert("report".into(), "report.json".into());
        artifacts.insert("erm_report".into(), "erm_report.json".into());
        if cfg.eval.plot && matches!(cfg.dataset, DatasetSource::Toy2d { .. }) {
            plot_toy(&cfg, &data, &erm.model, gic.as_ref(), &robust_model, seed, &c.dir.join("boundaries.svg"))
                .map_err(|e| e.in_stage("evaluate"))?;
            artifacts.insert("plot".into(), "boundaries.svg".into());
        }
    }

    Ok(SeedOutcome {
        seed,
        erm: erm_acc,
        robust: robust_acc,
        spurious_term: gic.as_ref().and_then(|g| g.curves.last()).map(|c| c.kl_total),
        groups,
        spurious_accuracy,
        precision_recall: pr,
        erm_model: erm.model,
        robust_model,
        gic,
        warnings,
        stage_keys: if dir.is_some() { keys } else { BTreeMap::new() },
        artifacts: if dir.is_some() { artifacts } else { BTreeMap::new() },
    })
}

fn json<T: Serialize + ?Sized>(v: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(v)?)
}

fn margin_of(model: &MlpModel) -> impl Fn(&Array2<f64>) -> Result<Vec<f64>> + '_ {
    move |x| {
        let l = model.logits(x)?;
        Ok(l.rows().into_iter().map(|r| r[1] - r[0]).collect())
    }
}

/// ERM, GIC, robust, invariant-only and spurious-only boundaries over the training scatter.
fn plot_toy(
    cfg: &PipelineConfig,
    data: &PreparedData,
    erm: &MlpModel,
    gic: Option<&GicArtifacts>,
    robust: &MlpModel,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let single = |col: usize, tag: &str| -> Result<MlpModel> {
        let x = data.train.features().select(Axis(1), &[col]);
        let d = data.train.with_features(x)?;
        Ok(train_erm(&d, &[1, 2], &cfg.erm.fit, rng::derive_seed(seed, tag))?.model)
    };
    let invariant = single(1, "plot/invariant")?;
    let spurious = single(0, "plot/spurious")?;
    let column_margin = |m: &MlpModel, col: usize| {
        let m = m.clone();
        move |x: &Array2<f64>| margin_of(&m)(&x.select(Axis(1), &[col]))
    };
    let mut models = vec![BoundaryModel {
        name: "erm".into(),
        margin: Box::new(margin_of(erm)),
    }];
    if let Some(g) = gic {
        models.push(BoundaryModel {
            name: "gic".into(),
            margin: Box::new(move |x| margin_of(&g.head)(&g.head_input(x)?)),
        });
    }
    models.push(BoundaryModel {
        name: "robust".into(),
        margin: Box::new(margin_of(robust)),
    });
    models.push(BoundaryModel {
        name: "invariant".into(),
        margin: Box::new(column_margin(&invariant, 1)),
    });
    models.push(BoundaryModel {
        name: "spurious".into(),
        margin: Box::new(column_margin(&spurious, 0)),
    });
    plot_boundary_2d(&models, &data.train, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub dir: String,
    pub stages: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub erm_worst_group_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub average_accuracy: f64,
    pub spurious_accuracy: Option<f64>,
    pub minority_precision: Option<f64>,
    pub minority_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: PipelineConfig,
    pub seeds: Vec<SeedEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn mean_worst_group_accuracy(&self) -> f64 {
        self.seeds.iter().map(|s| s.worst_group_accuracy).sum::<f64>() / self.seeds.len().max(1) as f64
    }
}

fn run_seeds<T: Send>(seeds: &[u64], workers: usize, job: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(workers.max(1)) {
        let results: Vec<Result<T>> = if chunk.len() == 1 {
            vec![job(chunk[0])]
        } else {
            let job = &job;
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || job(seed))).collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Runs every seed into `output_dir/seed-<s>` and writes `manifest.json`.
/// Completed stages are reused when their cache key matches unless `force`.
pub fn run_pipeline(cfg: &PipelineConfig, force: bool) -> Result<(Manifest, Vec<SeedOutcome>)> {
    cfg.validate()?;
    let eff = cfg.effective();
    fs::create_dir_all(&eff.output_dir)?;
    let outcomes = run_seeds(&eff.seeds(), eff.workers, |seed| {
        execute(&eff, seed, Shared::default(), Some(&eff.output_dir.join(format!("seed-{seed}"))), force)
    })?;
    let manifest = Manifest {
        config_hash: eff.hash()?,
        config: eff.clone(),
        seeds: outcomes
            .iter()
            .map(|o| SeedEntry {
                seed: o.seed,
                dir: format!("seed-{}", o.seed),
                stages: o.stage_keys.clone(),
                artifacts: o.artifacts.clone(),
                erm_worst_group_accuracy: o.erm.worst,
                worst_group_accuracy: o.robust.worst,
                average_accuracy: o.robust.average,
                spurious_accuracy: o.spurious_accuracy,
                minority_precision: o.precision_recall.as_ref().map(|p| p.precision),
                minority_recall: o.precision_recall.as_ref().map(|p| p.recall),
            })
            .collect(),
    };
    fs::write(eff.output_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok((manifest, outcomes))
}

/// One seed without touching the filesystem.
pub fn run_seed_in_memory(cfg: &PipelineConfig, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    execute(cfg, seed, Shared::default(), None, false)
}

/// Same as [`run_seed_in_memory`] on caller-provided data.
pub fn run_seed_on(cfg: &PipelineConfig, seed: u64, data: PreparedData) -> Result<SeedOutcome> {
    cfg.validate()?;
    execute(
        cfg,
        seed,
        Shared {
            data: Some(data),
            erm: None,
        },
        None,
        false,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStudyRow {
    pub size: usize,
    pub labeled: bool,
    pub spurious_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub seeds: usize,
}

/// For each `(labeled, size)`, draws `size` rows of the provided comparison
/// pool and runs the pipeline on every seed; rows hold means over seeds.
pub fn study_comparison_size(cfg: &PipelineConfig, sizes: &[usize], labeled_modes: &[bool]) -> Result<Vec<SizeStudyRow>> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(GicError::Study("sizes must be a non-empty list of positive counts".into()));
    }
    if labeled_modes.is_empty() {
        return Err(GicError::Study("at least one of labeled/unlabeled must be studied".into()));
    }
    if cfg.comparison.source != ComparisonSource::Provided {
        return Err(GicError::Study("the size study subsamples a provided comparison set".into()));
    }
    if cfg.groups == GroupSource::Oracle {
        return Err(GicError::Study("the size study needs GIC-inferred groups".into()));
    }
    let per_seed = run_seeds(&cfg.seeds(), cfg.workers, |seed| {
        let data = prepare_data(&cfg.dataset, seed).map_err(|e| e.in_stage("data"))?;
        if let Some(&too_big) = sizes.iter().find(|&&s| s > data.comparison.len()) {
            return Err(GicError::Study(format!(
                "size {too_big} exceeds the comparison pool of {} rows",
                data.comparison.len()
            )));
        }
        let mut erm = None;
        let mut rows = Vec::new();
        for &labeled in labeled_modes {
            for &size in sizes {
                let mut r = rng::stream(seed, &format!("study/size/{size}"));
                let mut idx = sample(&mut r, data.comparison.len(), size).into_vec();
                idx.sort_unstable();
                let mut run_data = data.clone();
                run_data.comparison = data.comparison.subset(&idx)?.renamed("comparison");
                let mut run_cfg = cfg.clone();
                run_cfg.comparison.labeled = labeled;
                let out = execute(
                    &run_cfg,
                    seed,
                    Shared {
                        data: Some(run_data),
                        erm: erm.clone(),
                    },
                    None,
                    false,
                )?;
                erm = Some(ErmArtifacts::from_model(out.erm_model.clone()));
                let acc = out.spurious_accuracy.ok_or_else(|| {
                    GicError::Study("spurious-attribute accuracy needs oracle attributes on the training set".into())
                })?;
                rows.push((labeled, size, acc, out.robust.worst));
            }
        }
        Ok(rows)
    })?;
    let n = per_seed.len() as f64;
    let mut out = Vec::new();
    for (i, &(labeled, size, _, _)) in per_seed[0].iter().enumerate() {
        out.push(SizeStudyRow {
            size,
            labeled,
            spurious_accuracy: per_seed.iter().map(|r| r[i].2).sum::<f64>() / n,
            worst_group_accuracy: per_seed.iter().map(|r| r[i].3).sum::<f64>() / n,
            seeds: per_seed.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyVariant {
    pub name: String,
    /// Group fractions of the comparison split.
    pub fractions: Vec<f64>,
    /// Readjust the comparison set with GIC groups and retrain.
    #[serde(default)]
    pub readjust: bool,
}

/// Comparison fractions on the segment from `from` to `to`.
pub fn interpolated_variants(from: &[f64], to: &[f64], ts: &[f64]) -> Vec<DiscrepancyVariant> {
    ts.iter()
        .map(|&t| DiscrepancyVariant {
            name: format!("t={t}"),
            fractions: from.iter().zip(to).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
            readjust: false,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRow {
    pub variant: String,
    pub readjust: bool,
    /// `KL(train groups || comparison groups)` over oracle group frequencies.
    pub group_kl: f64,
    pub spurious_term: f64,
    pub worst_group_accuracy: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyStudy {
    pub rows: Vec<DiscrepancyRow>,
    /// Spearman correlation between `group_kl` and worst-group accuracy over the rows.
    pub spearman: f64,
}

/// Empirical oracle group distribution.
pub fn group_distribution(data: &LabeledDataset) -> Result<Vec<f64>> {
    let counts = data
        .group_counts()
        .ok_or_else(|| GicError::Study(format!("`{}` has no oracle groups", data.name)))?;
    let n: usize = counts.iter().sum();
    Ok(counts.iter().map(|&c| c as f64 / n as f64).collect())
}

/// Regenerates the surrogate with each variant's comparison fractions (train
/// and test splits are unchanged) and runs the pipeline on every seed.
pub fn study_discrepancy(cfg: &PipelineConfig, variants: &[DiscrepancyVariant]) -> Result<DiscrepancyStudy> {
    cfg.validate()?;
    let DatasetSource::Synth { spec } = &cfg.dataset else {
        return Err(GicError::Study("the discrepancy study regenerates a synthetic surrogate".into()));
    };
    if variants.is_empty() {
        return Err(GicError::Study("no comparison variants given".into()));
    }
    if cfg.groups == GroupSource::Oracle || cfg.comparison.source != ComparisonSource::Provided {
        return Err(GicError::Study("the discrepancy study needs GIC groups on a provided comparison set".into()));
    }
    let specs: Vec<SynthSpuriousSpec> = variants
        .iter()
        .map(|v| {
            let mut s = spec.clone();
            s.group_fractions[1] = v.fractions.clone();
            s.validate().map_err(|e| GicError::Study(format!("variant `{}`: {e}", v.name)))?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let per_seed = run_seeds(&cfg.seeds(), cfg.workers, |seed| {
        let mut erm = None;
        let mut rows = Vec::new();
        for (v, s) in variants.iter().zip(&specs) {
            let mut run_cfg = cfg.clone();
            run_cfg.readjust = v.readjust;
            run_cfg.dataset = DatasetSource::Synth { spec: s.clone() };
            let data = prepare_data(&run_cfg.dataset, seed).map_err(|e| e.in_stage("data"))?;
            let kl = kl_discrete(&group_distribution(&data.train)?, &group_distribution(&data.comparison)?)
                .map_err(|e| GicError::Study(format!("variant `{}`: {e}", v.name)))?;
            let out = execute(
                &run_cfg,
                seed,
                Shared {
                    data: Some(data),
                    erm: erm.clone(),
                },
                None,
                false,
            )?;
            erm = Some(ErmArtifacts::from_model(out.erm_model.clone()));
            rows.push((kl, out.spurious_term.unwrap_or(f64::NAN), out.robust.worst));
        }
        Ok(rows)
    })?;
    let n = per_seed.len() as f64;
    let rows: Vec<DiscrepancyRow> = variants
        .iter()
        .enumerate()
        .map(|(i, v)| DiscrepancyRow {
            variant: v.name.clone(),
            readjust: v.readjust,
            group_kl: per_seed.iter().map(|r| r[i].0).sum::<f64>() / n,
            spurious_term: per_seed.iter().map(|r| r[i].1).sum::<f64>() / n,
            worst_group_accuracy: per_seed.iter().map(|r| r[i].2).sum::<f64>() / n,
            seeds: per_seed.len(),
        })
        .collect();
    let kl: Vec<f64> = rows.iter().map(|r| r.group_kl).collect();
    let worst: Vec<f64> = rows.iter().map(|r| r.worst_group_accuracy).collect();
    Ok(DiscrepancyStudy {
        spearman: spearman(&kl, &worst),
        rows,
    })
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; NaN when either side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn write_size_study(rows: &[SizeStudyRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

pub fn write_discrepancy_study(rows: &[DiscrepancyRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_of_monotone_and_reversed() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4)
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12, "{r}");
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }

    #[test]
    fn attribute_accuracy_ignores_relabeling() {
        assert_eq!(attribute_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(attribute_accuracy(&[0, 1, 2, 2], &[2, 0, 1, 0], 3).unwrap(), 0.75);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = PipelineConfig::toy2d()
            .with_overrides(&["gic.gamma=3.5", "robust.method=\"groupdro\"", "num_seeds=1", "output_dir=out/x"])
            .unwrap();
        assert_eq!(c.gic.gamma, 3.5);
        assert_eq!(c.robust.method, RobustMethod::GroupDro);
        assert_eq!(c.num_seeds, 1);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert!(PipelineConfig::toy2d().with_overrides(&["gic.gamma"]).is_err());
        assert!(PipelineConfig::toy2d().with_overrides(&["gic.gamma=\"high\""]).is_err());
    }

    #[test]
    fn toml_round_trip_of_presets() {
        for c in [PipelineConfig::toy2d(), PipelineConfig::cmnist()] {
            let text = c.to_toml_string().unwrap();
            assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
        }
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = PipelineConfig::from_toml_str("num_seeds = 2\n[gic]\ngamma = 4.0\n[dataset]\nkind = \"toy2d\"\n").unwrap();
        assert_eq!(c.num_seeds, 2);
        assert_eq!(c.gic.gamma, 4.0);
        assert_eq!(c.gic.epochs, 20);
        assert_eq!(c.robust, RobustTrainConfig::default());
    }

    #[test]
    fn validation_is_total_before_compute() {
        let bad = [
            PipelineConfig { num_seeds: 0, ..PipelineConfig::toy2d() },
            PipelineConfig { phi: PhiMode::TrainedExtractor, ..PipelineConfig::toy2d() },
            PipelineConfig { readjust: true, groups: GroupSource::Oracle, ..PipelineConfig::toy2d() },
            PipelineConfig::toy2d().with_overrides(&["gic.gamma=-1"]).unwrap(),
            PipelineConfig::toy2d().with_overrides(&["comparison.ratio=0.9"]).unwrap(),
            PipelineConfig::toy2d().with_overrides(&["robust.mixup_alpha=0"]).unwrap().with_overrides(&["robust.method=\"mixup\""]).unwrap(),
        ];
        for c in &bad {
            assert!(matches!(c.validate(), Err(GicError::Config(_))), "{c:?}");
        }
        PipelineConfig::toy2d().validate().unwrap();
        PipelineConfig::cmnist().validate().unwrap();
    }

    #[test]
    fn unlabeled_plan_switches_the_term_mode() {
        let c = PipelineConfig::toy2d().with_overrides(&["comparison.labeled=false"]).unwrap();
        assert_eq!(c.effective().gic.mode, TermMode::Unlabeled);
    }

    #[test]
    fn identical_train_and_comparison_groups_have_zero_kl() {
        let mut spec = SynthSpuriousSpec::cmnist();
        spec.n = [400, 400, 100];
        spec.group_fractions[1] = spec.group_fractions[0].clone();
        let s = gen_synth_spurious(&spec, 0).unwrap();
        let kl = kl_discrete(&group_distribution(&s.train.data).unwrap(), &group_distribution(&s.comparison.data).unwrap()).unwrap();
        assert_eq!(kl, 0.0);
    }
}
