//! `ltg`: data generation, training, prediction, evaluation, the ablation
//! and gradient checks for the locate-then-generate pipeline.
//!
//! Relative output paths are resolved under `$LTG_OUTPUT_ROOT` when set.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ltg_core::agm::{AgmConfig, AgmModel, DecodeConfig};
use ltg_core::alm::{AlmConfig, AlmModel};
use ltg_core::dataworld::{corrupt_ocr, generate_dataset, load_dataset, save_dataset, CorruptionSpec, Dataset};
use ltg_core::evalsuite::{evaluate_run, PredictionRecord};
use ltg_core::gradcheck::{check_agm, check_alm, GradCheckConfig};
use ltg_core::harness::{
    evaluate_seed, predict, read_jsonl, summarize_ablation, train_agm, train_alm, train_seed, write_jsonl, DirLock,
    PipelineConfig, Selection,
};
use ltg_core::params::{load_checkpoint, save_checkpoint};
use ltg_core::preprocess::build_targets;

const OUTPUT_ROOT_ENV: &str = "LTG_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "ltg", version, about = "Locate-then-generate scene-text question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set alm_train.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// World seed for gen-data, training seed elsewhere (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    None,
    Visual,
    Linguistic,
    Mixed,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::None => Selection::None,
            SelectionArg::Visual => Selection::Visual,
            SelectionArg::Linguistic => Selection::Linguistic,
            SelectionArg::Mixed => Selection::Mixed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.jsonl and test.jsonl (and optionally a corrupted test split).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write test_corrupted.jsonl with this per-character substitution rate.
        #[arg(long)]
        char_sub_rate: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        word_drop_rate: f64,
        #[arg(long, default_value_t = 0)]
        corruption_seed: u64,
    },
    /// Train the answer locator.
    TrainAlm {
        /// Directory holding train.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the answer generator on top of a trained locator.
    TrainAgm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write one prediction record per scene.
    Predict {
        /// A dataset file, e.g. test.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alm: Option<PathBuf>,
        #[arg(long)]
        agm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "mixed")]
        selection: SelectionArg,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score a prediction file against a dataset file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report record here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the None / V / L / V+L selection variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference check of both training losses.
    Gradcheck {
        #[arg(long, default_value_t = 128)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn resolve(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_split(dir: &Path, name: &str) -> Result<Dataset> {
    let path = dir.join(name);
    Ok(load_dataset(&path)?)
}

fn load_alm(path: &Path) -> Result<AlmModel> {
    let (header, store) = load_checkpoint(path)?;
    if header.kind != "alm" {
        bail!("{} holds a `{}` checkpoint, expected `alm`", path.display(), header.kind);
    }
    let config: AlmConfig = serde_json::from_value(header.config).context("locator checkpoint config")?;
    Ok(AlmModel::from_store(config, store)?)
}

fn load_agm(path: &Path) -> Result<AgmModel> {
    let (header, store) = load_checkpoint(path)?;
    if header.kind != "agm" {
        bail!("{} holds a `{}` checkpoint, expected `agm`", path.display(), header.kind);
    }
    let config: AgmConfig = serde_json::from_value(header.config).context("generator checkpoint config")?;
    Ok(AgmModel::from_store(config, store)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            config,
            char_sub_rate,
            word_drop_rate,
            corruption_seed,
        } => {
            let cfg = config.load()?;
            let out = resolve(&out);
            ensure_dir(&out)?;
            let splits = generate_dataset(&cfg.world, cfg.seed)?;
            save_dataset(&out.join("train.jsonl"), &splits.train)?;
            save_dataset(&out.join("test.jsonl"), &splits.test)?;
            if let Some(rate) = char_sub_rate {
                let spec = CorruptionSpec::new(rate, word_drop_rate, corruption_seed)?;
                let mut corrupted = splits.test.clone();
                corrupted.instances = splits.test.instances.iter().map(|s| corrupt_ocr(s, &spec)).collect();
                save_dataset(&out.join("test_corrupted.jsonl"), &corrupted)?;
            }
            println!(
                "wrote {} train and {} test scenes to {}",
                splits.train.len(),
                splits.test.len(),
                out.display()
            );
        }
        Command::TrainAlm { data, out, config } => {
            let cfg = config.load()?;
            let train = load_split(&data, "train.jsonl")?;
            let out = resolve(&out);
            let _lock = DirLock::acquire(&out)?;
            let run = train_alm(&train.instances, &cfg.alm, &cfg.alm_train, cfg.seed)?;
            save_checkpoint(&out.join("alm.ckpt"), "alm", serde_json::to_value(&run.model.config)?, &run.model.store)?;
            write_jsonl(&out.join("alm_log.jsonl"), &run.log)?;
            plot::line_chart(
                &out.join("alm_loss.png"),
                &[
                    run.log.iter().map(|l| l.loss_bbox).collect(),
                    run.log.iter().map(|l| l.loss_s).collect(),
                ],
            )?;
            for l in &run.log {
                println!(
                    "epoch {:>3}  loss_bbox {:.4}  loss_s {:.4}  val_f1 {:.4}  val_iou {:.4}",
                    l.epoch, l.loss_bbox, l.loss_s, l.val_selection_f1, l.val_mean_iou
                );
            }
            if let Some((epoch, step)) = run.diverged {
                return Err(ltg_core::Error::Diverged { epoch, step })
                    .context("last good parameters were written to alm.ckpt");
            }
        }
        Command::TrainAgm { data, alm, out, config } => {
            let cfg = config.load()?;
            let train = load_split(&data, "train.jsonl")?;
            let alm = load_alm(&alm)?;
            let out = resolve(&out);
            let _lock = DirLock::acquire(&out)?;
            let run = train_agm(&train.instances, Some(&alm), &cfg.agm, &cfg.agm_train, cfg.seed)?;
            save_checkpoint(&out.join("agm.ckpt"), "agm", serde_json::to_value(run.model.config)?, &run.model.store)?;
            write_jsonl(&out.join("agm_log.jsonl"), &run.log)?;
            plot::line_chart(&out.join("agm_loss.png"), &[run.log.iter().map(|l| l.loss_g).collect()])?;
            for l in &run.log {
                println!(
                    "epoch {:>3}  loss_g {:.4}  exposure {:<9}  val_exact {:.4}",
                    l.epoch, l.loss_g, l.exposure, l.val_exact_match
                );
            }
            if let Some((epoch, step)) = run.diverged {
                return Err(ltg_core::Error::Diverged { epoch, step })
                    .context("last good parameters were written to agm.ckpt");
            }
        }
        Command::Predict {
            data,
            alm,
            agm,
            out,
            selection,
            beam,
        } => {
            let scenes = load_dataset(&data)?;
            let alm = alm.as_deref().map(load_alm).transpose()?;
            let agm = load_agm(&agm)?;
            let decode = DecodeConfig {
                beam_size: beam.unwrap_or(1),
            };
            let preds = predict(alm.as_ref(), &agm, &scenes.instances, selection.into(), &decode)?;
            let out = resolve(&out);
            if let Some(parent) = out.parent() {
                ensure_dir(parent)?;
            }
            write_jsonl(&out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval { predictions, data, out } => {
            let preds: Vec<PredictionRecord> = read_jsonl(&predictions)?;
            let scenes = load_dataset(&data)?;
            let report = evaluate_run(&preds, &scenes.instances)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                let out = resolve(&out);
                if let Some(parent) = out.parent() {
                    ensure_dir(parent)?;
                }
                write_json(&out, &report)?;
            }
        }
        Command::Ablate {
            data,
            out,
            seeds,
            config,
        } => {
            let cfg = config.load()?;
            if seeds.len() < 3 {
                bail!("the ablation needs at least 3 seeds, got {}", seeds.len());
            }
            let train = load_split(&data, "train.jsonl")?;
            let test = load_split(&data, "test.jsonl")?;
            let out = resolve(&out);
            let _lock = DirLock::acquire(&out)?;
            let mut per_seed = Vec::new();
            for &seed in &seeds {
                let models = train_seed(&train.instances, &cfg, seed)?;
                per_seed.push((seed, evaluate_seed(&models, &test.instances, &cfg.decode)?));
                eprintln!("seed {seed} done");
            }
            let report = summarize_ablation(&per_seed);
            write_json(&out.join("ablation.json"), &report)?;
            let table = report.to_table();
            std::fs::write(out.join("ablation.txt"), &table)?;
            plot::bar_chart(
                &out.join("ablation.png"),
                &report.rows.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>(),
                &report.rows.iter().map(|r| r.sd_accuracy).collect::<Vec<_>>(),
            )?;
            print!("{table}");
        }
        Command::Gradcheck {
            coords,
            eps,
            tolerance,
            config,
        } => {
            let cfg = config.load()?;
            let world = ltg_core::WorldConfig {
                n_train: 4,
                n_test: 0,
                ..cfg.world.clone()
            };
            let scenes = generate_dataset(&world, cfg.seed)?.train.instances;
            let scene = &scenes[0];
            let gc = GradCheckConfig {
                eps,
                coords,
                tolerance,
                seed: cfg.seed,
                ..GradCheckConfig::default()
            };
            let alm = AlmModel::new(cfg.alm.clone(), cfg.seed)?;
            let targets = build_targets(&scene.answer_tokens, &scene.tokens);
            let agm = AgmModel::new(cfg.agm, cfg.seed)?;
            let words: Vec<String> = targets.matched_indices.iter().map(|&i| scene.tokens[i].word.clone()).collect();
            let mut batch = agm.batch(&scene.question, &words, &ltg_core::harness::scene_words(scene))?;
            batch.target_ids = ltg_core::agm::target_pieces(agm.vocab(), &scene.answer_tokens);
            let mut ok = true;
            for report in [check_alm(&alm, scene, &targets, &gc)?, check_agm(&agm, &batch, &gc)?] {
                println!(
                    "{:<7} coords {:>4}  max relative error {:.3e}  {}",
                    report.name,
                    report.checked,
                    report.max_rel_error,
                    if report.passed { "PASS" } else { "FAIL" }
                );
                ok &= report.passed;
            }
            if !ok {
                bail!("gradient check exceeded tolerance {tolerance:e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
