//! `gic` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gic_core::comparison::build_comparison_from_train;
use gic_core::data::{gen_synth_spurious, gen_toy2d, load_dataset, save_dataset, DataFormat, LabeledDataset, SynthSpuriousSpec, Toy2dSpec};
use gic_core::erm::{extract_features, train_erm, ErmArtifacts, Extractor};
use gic_core::error::ErrorClass;
use gic_core::eval::{evaluate_model, minority_precision_recall, EvalReport};
use gic_core::gic::{grid_search, infer_groups, train_gic, write_curves, write_grid, GicArtifacts, GicConfig, DEFAULT_TAU};
use gic_core::invariant::{train_robust, GroupAssignment, RobustMethod, RobustTrainConfig};
use gic_core::kl::TermMode;
use gic_core::nn::{FitConfig, MlpModel, SgdParams};
use gic_core::pipeline::{
    interpolated_variants, run_pipeline, study_comparison_size, study_discrepancy, write_discrepancy_study,
    write_size_study, DiscrepancyVariant, PipelineConfig,
};
use gic_core::{GicError, Result};

#[derive(Parser)]
#[command(name = "gic", version, about = "Group inference via data comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four-Gaussian toy splits (train/val/test).
    GenToy2d {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Bin)]
        format: Format,
    },
    /// Generate a spurious-feature surrogate (train/comparison/test).
    GenSynth {
        #[arg(long, default_value = "cmnist")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Bin)]
        format: Format,
    },
    /// Stage 1: train the ERM classifier.
    TrainErm {
        /// Dataset file, or a directory holding `train.bin`.
        #[arg(long)]
        data: PathBuf,
        /// Layer widths, e.g. `2,16,2`; defaults to a linear model.
        #[arg(long, value_delimiter = ',')]
        arch: Option<Vec<usize>>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        /// 0 trains full-batch.
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace features with the ERM representation.
    ExtractFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Phi::Penultimate)]
        mode: Phi,
    },
    /// Sample comparison data from the ERM error / non-error sets.
    BuildComparison {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_comparison: PathBuf,
        #[arg(long)]
        out_train: PathBuf,
    },
    /// Stage 2: train the spurious-attribute classifier.
    TrainGic {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        comparison: PathBuf,
        #[command(flatten)]
        gic: GicArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Select (gamma, K) by walking the grids until CE stops increasing.
    GridSearch {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        comparison: PathBuf,
        #[command(flatten)]
        gic: GicArgs,
        #[arg(long, value_delimiter = ',', default_value = "10,5,4,3,2,1")]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "20,15,14,13,12,11,10,9,8,7,6,5,4,3,2,1")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// CSV of (gamma, K, detected, final CE, final KL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign inferred groups with a trained GIC head.
    InferGroups {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 3: train a robust model on (inferred) groups.
    TrainRobust {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        groups: PathBuf,
        #[arg(long, default_value = "subsample")]
        method: RobustMethod,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// 0 trains full-batch.
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        early_stop: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Worst-group / average accuracy report of a model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Inferred groups of `data`, for minority precision/recall.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stages 1-3 plus evaluation for every seed, with a manifest.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Recompute stages even when cached artifacts match.
        #[arg(long)]
        force: bool,
    },
    /// Spurious-attribute and worst-group accuracy versus comparison size.
    StudyComparisonSize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Study labeled comparison subsets.
        #[arg(long)]
        labeled: bool,
        /// Study unlabeled comparison subsets.
        #[arg(long)]
        unlabeled: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Worst-group accuracy versus train/comparison group-distribution KL.
    StudyDiscrepancy {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// TOML file with `[[variants]]` tables (name, fractions, readjust).
        #[arg(long, conflicts_with = "towards")]
        variants: Option<PathBuf>,
        /// Interpolate comparison fractions from the training fractions towards these.
        #[arg(long, value_delimiter = ',')]
        towards: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.33,0.67,1")]
        steps: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Bin => "bin",
        }
    }

    fn data_format(self) -> DataFormat {
        match self {
            Format::Csv => DataFormat::Csv,
            Format::Bin => DataFormat::Bin,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Phi {
    Identity,
    Penultimate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Labeled,
    Unlabeled,
}

#[derive(Args)]
struct GicArgs {
    #[arg(long, value_enum, default_value_t = Mode::Labeled)]
    mode: Mode,
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    /// Feed representations to the head without standardization.
    #[arg(long)]
    no_standardize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl GicArgs {
    fn config(&self) -> GicConfig {
        GicConfig {
            gamma: self.gamma,
            epochs: self.epochs,
            lr: self.lr,
            mode: match self.mode {
                Mode::Labeled => TermMode::Labeled,
                Mode::Unlabeled => TermMode::Unlabeled,
            },
            head_hidden: self.hidden.clone(),
            standardize: !self.no_standardize,
            seed: self.seed,
            ..GicConfig::default()
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config, or a run manifest (`manifest.json`) to replay.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// `toy2d` or `cmnist`.
    #[arg(long)]
    preset: Option<String>,
    /// `dotted.key=value` override (repeatable), e.g. `--set gic.gamma=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(path), _) => PipelineConfig::load(path)?,
            (None, Some(name)) => PipelineConfig::preset(name)?,
            (None, None) => PipelineConfig::toy2d(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(n) = self.seeds {
            cfg.num_seeds = n;
        }
        if let Some(s) = self.base_seed {
            cfg.base_seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(d) = &self.out_dir {
            cfg.output_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(path: &Path) -> Result<LabeledDataset> {
    load_dataset(path, DataFormat::from_path(path))
}

fn save(data: &LabeledDataset, path: &Path) -> Result<()> {
    save_dataset(data, path, DataFormat::from_path(path))
}

fn batch(size: usize) -> Option<usize> {
    (size > 0).then_some(size)
}

fn write_splits(out: &Path, format: Format, splits: &[(&str, &LabeledDataset)]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for (name, d) in splits {
        let path = out.join(format!("{name}.{}", format.ext()));
        save_dataset(d, &path, format.data_format())?;
        log::info!("wrote {} ({} rows)", path.display(), d.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToy2d { out, seed, format } => {
            let (tr, val, ts) = gen_toy2d(&Toy2dSpec::default(), seed)?;
            write_splits(&out, format, &[("train", &tr), ("val", &val), ("test", &ts)])
        }
        Command::GenSynth {
            preset,
            out,
            seed,
            format,
        } => {
            let spec = match preset.as_str() {
                "cmnist" => SynthSpuriousSpec::cmnist(),
                other => return Err(GicError::Config(format!("unknown synthetic preset `{other}`"))),
            };
            let s = gen_synth_spurious(&spec, seed)?;
            write_splits(
                &out,
                format,
                &[("train", &s.train.data), ("comparison", &s.comparison.data), ("test", &s.test.data)],
            )
        }
        Command::TrainErm {
            data,
            arch,
            epochs,
            lr,
            momentum,
            weight_decay,
            batch_size,
            seed,
            out,
        } => {
            let path = if data.is_dir() { data.join("train.bin") } else { data };
            let d = load(&path)?;
            let arch = arch.unwrap_or_else(|| vec![d.dim(), d.num_classes()]);
            let cfg = FitConfig {
                epochs,
                batch_size: batch(batch_size),
                sgd: SgdParams::new(lr, momentum, weight_decay),
            };
            cfg.sgd.validate()?;
            let art = train_erm(&d, &arch, &cfg, seed)?;
            if let Some(last) = art.train_curve.last() {
                log::info!("final epoch: loss {:.4}, accuracy {:.4}", last.loss, last.accuracy);
            }
            art.model.save(&out)
        }
        Command::ExtractFeatures { model, data, out, mode } => {
            let art = ErmArtifacts::from_model(MlpModel::load(&model)?);
            let mode = match mode {
                Phi::Identity => Extractor::Identity,
                Phi::Penultimate => Extractor::Penultimate,
            };
            save(&extract_features(&art, &load(&data)?, mode)?, &out)
        }
        Command::BuildComparison {
            train,
            model,
            ratio,
            seed,
            out_comparison,
            out_train,
        } => {
            let split = build_comparison_from_train(&load(&train)?, &MlpModel::load(&model)?, ratio, seed)?;
            for w in &split.warnings {
                log::warn!("{w}");
            }
            save(&split.comparison, &out_comparison)?;
            save(&split.remaining, &out_train)
        }
        Command::TrainGic {
            train,
            comparison,
            gic,
            out,
            curves,
        } => {
            let cfg = gic.config();
            let mut c = load(&comparison)?;
            if cfg.mode == TermMode::Unlabeled {
                c = c.without_labels();
            }
            let art = train_gic(&load(&train)?, &c, &cfg)?;
            if let Some(last) = art.curves.last() {
                log::info!("final epoch: CE {:.4}, KL {:.4}", last.ce_loss, last.kl_total);
            }
            art.save(&out)?;
            match curves {
                Some(p) => write_curves(&art.curves, &p),
                None => Ok(()),
            }
        }
        Command::GridSearch {
            train,
            comparison,
            gic,
            gammas,
            ks,
            tau,
            out,
        } => {
            let cfg = gic.config();
            let mut c = load(&comparison)?;
            if cfg.mode == TermMode::Unlabeled {
                c = c.without_labels();
            }
            let res = grid_search(&load(&train)?, &c, &cfg, &gammas, &ks, tau)?;
            println!("gamma={} K={} exhausted={}", res.gamma, res.epochs, res.exhausted);
            write_grid(&res.points, &out)
        }
        Command::InferGroups { model, data, out } => {
            let groups = infer_groups(&GicArtifacts::load(&model)?, &load(&data)?)?;
            log::info!("inferred group sizes {:?}", groups.sizes());
            groups.save_csv(&out)
        }
        Command::TrainRobust {
            data,
            groups,
            method,
            epochs,
            lr,
            batch_size,
            hidden,
            alpha,
            eta,
            val,
            early_stop,
            seed,
            out,
        } => {
            let d = load(&data)?;
            let groups = GroupAssignment::load_csv(&groups, d.num_classes())?;
            let val = val.as_deref().map(load).transpose()?;
            let cfg = RobustTrainConfig {
                method,
                epochs,
                batch_size: batch(batch_size),
                sgd: SgdParams::new(lr, 0.9, 1e-4),
                hidden,
                groupdro_eta: eta,
                mixup_alpha: alpha,
                early_stop,
                seed,
                ..RobustTrainConfig::default()
            };
            let outcome = train_robust(&d, &groups, &cfg, val.as_ref())?;
            log::info!("selected epoch {}", outcome.selected_epoch);
            outcome.model.save(&out)
        }
        Command::Evaluate {
            model,
            data,
            report,
            groups,
            seed,
        } => {
            let d = load(&data)?;
            let acc = evaluate_model(&MlpModel::load(&model)?, &d)?;
            let pr = match groups {
                Some(p) => {
                    let g = GroupAssignment::load_csv(&p, d.num_classes())?;
                    Some(minority_precision_recall(&g.group_id, &d.require_group_ids()?, d.num_groups(), None)?)
                }
                None => None,
            };
            let echo = serde_json::json!({ "model": model, "data": data });
            let r = EvalReport::new(&acc, pr.as_ref(), echo, seed);
            println!("worst-group {:.4}  average {:.4}", r.worst_group_accuracy, r.average_accuracy);
            r.emit(&report)
        }
        Command::Pipeline { cfg, force } => {
            let cfg = cfg.resolve()?;
            let (manifest, _) = run_pipeline(&cfg, force)?;
            for s in &manifest.seeds {
                println!(
                    "seed {}: ERM worst {:.4} -> robust worst {:.4} (avg {:.4})",
                    s.seed, s.erm_worst_group_accuracy, s.worst_group_accuracy, s.average_accuracy
                );
            }
            println!("manifest: {}", cfg.output_dir.join("manifest.json").display());
            Ok(())
        }
        Command::StudyComparisonSize {
            cfg,
            sizes,
            labeled,
            unlabeled,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let modes: Vec<bool> = match (labeled, unlabeled) {
                (false, false) => vec![true],
                (l, u) => [(l, true), (u, false)].into_iter().filter(|p| p.0).map(|p| p.1).collect(),
            };
            let rows = study_comparison_size(&cfg, &sizes, &modes)?;
            for r in &rows {
                println!(
                    "size {:>6} {:>9}: spurious acc {:.4}, worst-group {:.4}",
                    r.size,
                    if r.labeled { "labeled" } else { "unlabeled" },
                    r.spurious_accuracy,
                    r.worst_group_accuracy
                );
            }
            write_size_study(&rows, &out)
        }
        Command::StudyDiscrepancy {
            cfg,
            variants,
            towards,
            steps,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let variants = match (variants, towards) {
                (Some(path), _) => {
                    #[derive(serde::Deserialize)]
                    struct File {
                        variants: Vec<DiscrepancyVariant>,
                    }
                    let text = std::fs::read_to_string(&path)?;
                    toml::from_str::<File>(&text)
                        .map_err(|e| GicError::Config(format!("invalid variants file: {e}")))?
                        .variants
                }
                (None, Some(to)) => {
                    let gic_core::pipeline::DatasetSource::Synth { spec } = &cfg.dataset else {
                        return Err(GicError::Config("--towards needs a synthetic dataset".into()));
                    };
                    interpolated_variants(&spec.group_fractions[0], &to, &steps)
                }
                (None, None) => return Err(GicError::Config("give --variants FILE or --towards FRACTIONS".into())),
            };
            let study = study_discrepancy(&cfg, &variants)?;
            for r in &study.rows {
                println!("{:>10}: group KL {:.4}, worst-group {:.4}", r.variant, r.group_kl, r.worst_group_accuracy);
            }
            println!("spearman {:.3}", study.spearman);
            write_discrepancy_study(&study.rows, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Training => 4,
            })
        }
    }
}
