//! The `glassdepth` command line.
//!
//! Every subcommand writes into a run directory (`--out`) holding the
//! resolved config (`config.txt`) next to its artifacts, so a run can be
//! repeated with `--config <run>/config.txt`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{load_codec, load_denoiser, save_codec, save_denoiser};
use crate::codec::Codec;
use crate::config::{reference_table, ExperimentConfig};
use crate::dataset::{list_ids, load_sample, tree_checksum, write_corpus, LoadOptions, SceneSample};
use crate::denoiser::ConditionMode;
use crate::error::{Error, Result};
use crate::evaluation::{
    ablate_condition, ablate_inference_steps, benchmark_method, condition_table, format_table, run_benchmark,
    steps_table, BenchmarkReport, Method, StepMode,
};
use crate::io;
use crate::pipeline::{prepare, refine_depth, Pipeline, Prepared};
use crate::plot::{write_heatmap, write_line_chart, Series};
use crate::scheduler::make_timestep_plan;
use crate::training::{train_codec, train_diffusion, LogRecord};

#[derive(Parser, Debug)]
#[command(name = "glassdepth", version, about = "Depth completion for transparent objects with latent diffusion")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for the subcommand's random choices (corpus, training or noise).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus (`<out>/{train,val,test}/<id>/` plus `corpus.json`).
    GenData {
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the global depth optimization and write refined depth maps.
    Preprocess {
        /// Directory of samples, e.g. `corpus/test`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the depth codec on ground-truth depth.
    TrainCodec {
        /// Directory of samples.
        #[arg(long)]
        data: PathBuf,
        /// Held-out samples for the round-trip error in `summary.json`.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser against a frozen codec.
    TrainDiffusion {
        /// Directory of samples.
        #[arg(long)]
        data: PathBuf,
        /// Codec checkpoint (`codec.gdck`).
        #[arg(long)]
        codec: PathBuf,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete depth for every sample (or one) and write `pred/<id>.{gdf,png}`.
    Infer {
        /// Directory of samples.
        #[arg(long)]
        data: PathBuf,
        /// Codec checkpoint (`codec.gdck`).
        #[arg(long)]
        codec: PathBuf,
        /// Denoiser checkpoint (`denoiser.gdck`).
        #[arg(long)]
        denoiser: PathBuf,
        /// Only this sample.
        #[arg(long)]
        id: Option<String>,
        /// Inference steps (defaults to `eval.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions and write `report.json` and `table.txt`.
    Eval {
        /// Directory of samples.
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<id>.gdf` predictions written by `infer`.
        #[arg(long, conflicts_with_all = ["denoiser", "method"])]
        pred: Option<PathBuf>,
        /// Built-in baseline instead of a trained model.
        #[arg(long, value_enum, conflicts_with = "denoiser")]
        method: Option<Baseline>,
        #[arg(long, requires = "denoiser")]
        codec: Option<PathBuf>,
        #[arg(long, requires = "codec")]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare fewer inference steps on the base model with models retrained on each plan.
    AblateSteps {
        /// Training samples for any checkpoint that has to be trained.
        #[arg(long)]
        train_data: PathBuf,
        /// Directory of samples.
        #[arg(long)]
        data: PathBuf,
        /// Codec checkpoint (`codec.gdck`).
        #[arg(long)]
        codec: PathBuf,
        /// Base checkpoint; trained under `<out>/base` when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// `COUNT=CHECKPOINT` for retrain mode; missing counts are trained under `<out>/retrain_<count>`.
        #[arg(long, value_name = "COUNT=PATH")]
        retrain: Vec<String>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Mode::Reuse, Mode::Retrain])]
        modes: Vec<Mode>,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare refined-depth conditioning with RGB-only conditioning.
    AblateCondition {
        /// Training samples for any checkpoint that has to be trained.
        #[arg(long)]
        train_data: PathBuf,
        /// Directory of samples.
        #[arg(long)]
        data: PathBuf,
        /// Codec checkpoint (`codec.gdck`).
        #[arg(long)]
        codec: PathBuf,
        /// Refined-condition checkpoint; trained under `<out>/refined` when absent.
        #[arg(long)]
        refined: Option<PathBuf>,
        /// RGB-only checkpoint; trained under `<out>/rgb_only` when absent.
        #[arg(long)]
        rgb_only: Option<PathBuf>,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss curves, step-ablation curves and depth/error heatmaps found in a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// Samples matching the run's `pred/` directory, for heatmaps.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every config key with its resolved value.
    ShowConfig {
        #[arg(long, value_enum, default_value_t = ConfigFormat::Text)]
        format: ConfigFormat,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Sensor depth, missing pixels scored as 0 m.
    Raw,
    /// Global optimization alone.
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Reuse,
    Retrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConfigFormat {
    /// `key = value` lines, readable by `--config`.
    Text,
    /// Markdown reference of commands, exit codes and keys.
    Reference,
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.global.verbose {
        let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Info).try_init();
    } else {
        let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Warn).try_init();
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(g: &Global, cmd: &Command) -> Result<ExperimentConfig> {
    let base = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_cli_overrides(&g.overrides)?;
    if let Some(seed) = g.seed {
        match cmd {
            Command::GenData { .. } => cfg.data.synth.seed = seed,
            Command::TrainCodec { .. } => cfg.codec_train.seed = seed,
            Command::TrainDiffusion { .. } | Command::AblateSteps { .. } | Command::AblateCondition { .. } => {
                cfg.train.seed = seed
            }
            _ => cfg.eval.seed = seed,
        }
    }
    Ok(cfg)
}

fn start_run(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_options(cfg: &ExperimentConfig) -> LoadOptions {
    LoadOptions {
        target: Some((cfg.data.synth.height, cfg.data.synth.width)),
        boundary_threshold: cfg.data.synth.boundary_threshold,
    }
}

pub fn load_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<SceneSample>> {
    let ids = list_ids(dir, cfg.data.kind)?;
    if ids.is_empty() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    ids.iter().map(|id| load_sample(dir, cfg.data.kind, id, load_options(cfg))).collect()
}

fn prepare_all(samples: Vec<SceneSample>, cfg: &ExperimentConfig) -> Result<Vec<Prepared>> {
    let norm = cfg.codec.normalization;
    samples.into_iter().map(|s| prepare(s, &cfg.geometry, &norm)).collect()
}

fn load_pipeline(codec: &Path, denoiser: &Path, cfg: &ExperimentConfig) -> Result<Pipeline> {
    let codec = load_codec(codec)?;
    let ck = load_denoiser(denoiser)?;
    if ck.codec_checksum != codec.params().checksum() {
        return Err(Error::Checkpoint(format!(
            "{} was trained against a different codec",
            denoiser.display()
        )));
    }
    Pipeline::new(codec, ck.denoiser, ck.train, cfg.geometry.clone())
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    fs::write(path, text)?;
    Ok(())
}

/// Trains a denoiser into `out` and returns the checkpoint path.
fn train_denoiser_run(out: &Path, data: &[Prepared], codec: &Codec, cfg: &ExperimentConfig) -> Result<PathBuf> {
    start_run(out, cfg)?;
    let (den, log) = train_diffusion(data, codec, &cfg.denoiser, &cfg.train)?;
    let path = out.join("denoiser.gdck");
    save_denoiser(&path, &den, &cfg.train, codec)?;
    write_log(&out.join("train_log.ndjson"), &log.records)?;
    println!(
        "trained denoiser: {} steps, final loss {:.5}, checkpoint {}",
        log.records.len(),
        log.records.last().map_or(f64::NAN, |r| r.loss),
        path.display()
    );
    Ok(path)
}

fn finish_benchmark(out: &Path, label: &str, report: &BenchmarkReport) -> Result<()> {
    write_json(&out.join("report.json"), report)?;
    let table = format_table(&["Method"], &[(vec![label.to_string()], report.aggregate)]);
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    println!(
        "scope {}, {} pixels, {} of {} samples failed",
        report.aggregate.mask_scope,
        report.aggregate.pixel_count,
        report.failures,
        report.samples.len()
    );
    if report.too_many_failures() {
        return Err(Error::EvaluationFailures {
            failed: report.failures,
            total: report.samples.len(),
        });
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global, &cli.command)?;
    match &cli.command {
        Command::ShowConfig { format } => {
            match format {
                ConfigFormat::Text => print!("{}", cfg.to_text()),
                ConfigFormat::Reference => print!("{}", reference_page()),
            }
            Ok(())
        }
        Command::GenData { out } => {
            start_run(out, &cfg)?;
            let manifest = write_corpus(out, &cfg.data.synth, cfg.data.count, cfg.data.fractions)?;
            println!(
                "wrote {} train, {} val, {} test samples to {}",
                manifest.split.train.len(),
                manifest.split.val.len(),
                manifest.split.test.len(),
                out.display()
            );
            println!("checksum {}", tree_checksum(out)?);
            Ok(())
        }
        Command::Preprocess { data, out } => {
            let samples = load_dir(data, &cfg)?;
            start_run(out, &cfg)?;
            let dir = out.join("refined");
            fs::create_dir_all(&dir)?;
            let mut stats = BTreeMap::new();
            for s in &samples {
                let (refined, report) = refine_depth(s, &cfg.geometry)?;
                io::write_depth_float(&dir.join(format!("{}.gdf", s.id)), &refined)?;
                io::write_depth_png(&dir.join(format!("{}.png", s.id)), &refined)?;
                stats.insert(s.id.clone(), report);
            }
            write_json(&out.join("solve.json"), &stats)?;
            println!("refined {} samples into {}", samples.len(), dir.display());
            Ok(())
        }
        Command::TrainCodec { data, val, out } => {
            let samples = load_dir(data, &cfg)?;
            let depths: Vec<_> = samples.iter().map(|s| s.gt_depth.clone()).collect();
            start_run(out, &cfg)?;
            let (codec, log) = train_codec(&depths, &cfg.codec, &cfg.codec_train)?;
            save_codec(&out.join("codec.gdck"), &codec)?;
            write_log(&out.join("codec_log.ndjson"), &log.records)?;
            let mut summary = BTreeMap::new();
            summary.insert("train_samples", samples.len() as f64);
            if let Some(v) = val {
                let held = load_dir(v, &cfg)?;
                let rmse = codec_round_trip_rmse(&codec, &held)?;
                summary.insert("val_round_trip_rmse_normalized", rmse);
                println!("held-out round-trip RMSE (normalized): {rmse:.5}");
            }
            write_json(&out.join("summary.json"), &summary)?;
            println!("codec checkpoint {}", out.join("codec.gdck").display());
            Ok(())
        }
        Command::TrainDiffusion { data, codec, out } => {
            let codec = load_codec(codec)?;
            let prepared = prepare_all(load_dir(data, &cfg)?, &cfg)?;
            train_denoiser_run(out, &prepared, &codec, &cfg)?;
            Ok(())
        }
        Command::Infer {
            data,
            codec,
            denoiser,
            id,
            steps,
            out,
        } => {
            let pipe = load_pipeline(codec, denoiser, &cfg)?;
            let ids = list_ids(data, cfg.data.kind)?;
            let plan = make_timestep_plan(pipe.denoiser.horizon(), steps.unwrap_or(cfg.eval.steps))?;
            start_run(out, &cfg)?;
            let dir = out.join("pred");
            fs::create_dir_all(&dir)?;
            let mut done = 0;
            for (i, sid) in ids.iter().enumerate() {
                if id.as_ref().is_some_and(|want| want != sid) {
                    continue;
                }
                let sample = load_sample(data, cfg.data.kind, sid, load_options(&cfg))?;
                let pred = pipe.infer(&sample, &plan, cfg.eval.seed.wrapping_add(i as u64))?;
                io::write_depth_float(&dir.join(format!("{sid}.gdf")), &pred)?;
                io::write_depth_png(&dir.join(format!("{sid}.png")), &pred)?;
                done += 1;
            }
            if let Some(want) = id {
                if done == 0 {
                    return Err(Error::MissingInput(data.join(want)));
                }
            }
            println!("wrote {done} predictions to {}", dir.display());
            Ok(())
        }
        Command::Eval {
            data,
            pred,
            method,
            codec,
            denoiser,
            steps,
            out,
        } => {
            let opts = cfg.eval.options();
            let samples = load_dir(data, &cfg)?;
            start_run(out, &cfg)?;
            if let Some(pdir) = pred {
                let report = run_benchmark(
                    &samples,
                    |s| s.id.clone(),
                    |_, s| {
                        let p = io::read_depth_float(&pdir.join(format!("{}.gdf", s.id)))?;
                        Ok((p, s.gt_depth.clone(), s.mask.clone()))
                    },
                    &opts,
                )?;
                return finish_benchmark(out, "predictions", &report);
            }
            let prepared = prepare_all(samples, &cfg)?;
            let (label, report) = match (method, codec, denoiser) {
                (Some(Baseline::Raw), _, _) => ("raw", benchmark_method(&prepared, Method::Raw, &opts)?),
                (Some(Baseline::Refined), _, _) => ("refined", benchmark_method(&prepared, Method::Refined, &opts)?),
                (None, Some(c), Some(d)) => {
                    let pipe = load_pipeline(c, d, &cfg)?;
                    let n = steps.unwrap_or(cfg.eval.steps);
                    ("diffusion", benchmark_method(&prepared, Method::Diffusion(&pipe, n), &opts)?)
                }
                _ => {
                    return Err(Error::Config(
                        "eval needs --pred, --method, or both --codec and --denoiser".into(),
                    ))
                }
            };
            finish_benchmark(out, label, &report)
        }
        Command::AblateSteps {
            train_data,
            data,
            codec,
            base,
            retrain,
            modes,
            out,
        } => {
            let codec_model = load_codec(codec)?;
            let counts = cfg.eval.ablation_counts.clone();
            let mut given: BTreeMap<usize, PathBuf> = BTreeMap::new();
            for r in retrain {
                let (c, p) = r
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--retrain '{r}' is not COUNT=PATH")))?;
                let c: usize = c
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("--retrain count '{c}' is not an integer")))?;
                given.insert(c, PathBuf::from(p.trim()));
            }
            start_run(out, &cfg)?;
            let needs_training = base.is_none() || counts.iter().any(|c| !given.contains_key(c));
            let train_set = if needs_training {
                prepare_all(load_dir(train_data, &cfg)?, &cfg)?
            } else {
                Vec::new()
            };
            let base_path = match base {
                Some(p) => p.clone(),
                None => train_denoiser_run(&out.join("base"), &train_set, &codec_model, &cfg)?,
            };
            let modes: Vec<StepMode> = modes
                .iter()
                .map(|m| match m {
                    Mode::Reuse => StepMode::Reuse,
                    Mode::Retrain => StepMode::Retrain,
                })
                .collect();
            let mut retrained = BTreeMap::new();
            if modes.contains(&StepMode::Retrain) {
                for &c in &counts {
                    let path = match given.get(&c) {
                        Some(p) => p.clone(),
                        None => {
                            let mut sub = cfg.clone();
                            sub.train.train_on_plan = true;
                            sub.train.inference_count = c;
                            train_denoiser_run(&out.join(format!("retrain_{c}")), &train_set, &codec_model, &sub)?
                        }
                    };
                    retrained.insert(c, load_pipeline(codec, &path, &cfg)?);
                }
            }
            let base_pipe = load_pipeline(codec, &base_path, &cfg)?;
            let test = prepare_all(load_dir(data, &cfg)?, &cfg)?;
            let opts = cfg.eval.options();
            let base_count = base_pipe.train.inference_count;
            let mut rows = Vec::new();
            if !counts.contains(&base_count) {
                rows = ablate_inference_steps(&base_pipe, &retrained, &[base_count], &[StepMode::Reuse], &test, &opts)?;
            }
            rows.extend(ablate_inference_steps(&base_pipe, &retrained, &counts, &modes, &test, &opts)?);
            write_json(&out.join("steps.json"), &rows)?;
            let table = steps_table(&rows);
            fs::write(out.join("steps.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::AblateCondition {
            train_data,
            data,
            codec,
            refined,
            rgb_only,
            out,
        } => {
            let codec_model = load_codec(codec)?;
            start_run(out, &cfg)?;
            let train_set = if refined.is_none() || rgb_only.is_none() {
                prepare_all(load_dir(train_data, &cfg)?, &cfg)?
            } else {
                Vec::new()
            };
            let mut paths = Vec::new();
            for (given, mode, name) in [
                (refined, ConditionMode::Refined, "refined"),
                (rgb_only, ConditionMode::RgbOnly, "rgb_only"),
            ] {
                let p = match given {
                    Some(p) => p.clone(),
                    None => {
                        let mut sub = cfg.clone();
                        sub.denoiser.condition = mode;
                        train_denoiser_run(&out.join(name), &train_set, &codec_model, &sub)?
                    }
                };
                paths.push(p);
            }
            let a = load_pipeline(codec, &paths[0], &cfg)?;
            let b = load_pipeline(codec, &paths[1], &cfg)?;
            let test = prepare_all(load_dir(data, &cfg)?, &cfg)?;
            let rows = ablate_condition(&a, &b, cfg.eval.steps, &test, &cfg.eval.options())?;
            write_json(&out.join("condition.json"), &rows)?;
            let table = condition_table(&rows);
            fs::write(out.join("condition.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Plot { run, data, out } => plot_run(run, data.as_deref(), out, &cfg),
    }
}

/// Normalized RMSE of `decode(encode(gt))` pooled over `samples`.
pub fn codec_round_trip_rmse(codec: &Codec, samples: &[SceneSample]) -> Result<f64> {
    let norm = codec.normalization();
    let (mut se, mut n) = (0.0, 0usize);
    for s in samples {
        let back = codec.decode(&codec.encode(&s.gt_depth)?)?;
        for (a, b) in back.values().iter().zip(s.gt_depth.values()) {
            let e = norm.normalize(*a) - norm.normalize(*b);
            se += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no samples for the round trip".into()));
    }
    Ok((se / n as f64).sqrt())
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn plot_run(run: &Path, data: Option<&Path>, out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    if !run.is_dir() {
        return Err(Error::MissingInput(run.to_path_buf()));
    }
    fs::create_dir_all(out)?;
    let mut made = Vec::new();
    for (file, title) in [("train_log.ndjson", "diffusion training"), ("codec_log.ndjson", "codec training")] {
        let p = run.join(file);
        if !p.exists() {
            continue;
        }
        let recs = read_log(&p)?;
        let mut series = vec![Series {
            label: "total".into(),
            points: recs.iter().map(|r| (r.step as f64, r.loss)).collect(),
        }];
        if recs.iter().any(|r| r.ddim != 0.0) {
            series.push(Series {
                label: "latent mse".into(),
                points: recs.iter().map(|r| (r.step as f64, r.ddim)).collect(),
            });
        }
        series.push(Series {
            label: "pixel".into(),
            points: recs.iter().map(|r| (r.step as f64, r.pixel)).collect(),
        });
        let target = out.join(file.replace(".ndjson", ".svg"));
        write_line_chart(&target, title, "step", "loss", &series)?;
        made.push(target);
    }
    let steps = run.join("steps.json");
    if steps.exists() {
        let rows: Vec<crate::evaluation::StepRow> = serde_json::from_str(&fs::read_to_string(&steps)?)?;
        let mut series = Vec::new();
        for mode in [StepMode::Reuse, StepMode::Retrain] {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| (r.count as f64, r.report.rmse))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if !pts.is_empty() {
                series.push(Series {
                    label: mode.to_string(),
                    points: pts,
                });
            }
        }
        let target = out.join("steps.svg");
        write_line_chart(&target, "error vs inference steps", "steps", "RMSE (m)", &series)?;
        made.push(target);
    }
    let pred_dir = run.join("pred");
    if let (Some(data), true) = (data, pred_dir.is_dir()) {
        for id in list_ids(data, cfg.data.kind)? {
            let p = pred_dir.join(format!("{id}.gdf"));
            if !p.exists() {
                continue;
            }
            let pred = io::read_depth_float(&p)?;
            let s = load_sample(data, cfg.data.kind, &id, load_options(cfg))?;
            let (h, w) = (s.height(), s.width());
            // depth panels share the ground truth's range
            let gt = s.gt_depth.values();
            let range = Some((
                gt.iter().cloned().fold(f64::MAX, f64::min),
                gt.iter().cloned().fold(f64::MIN, f64::max),
            ));
            let err: Vec<f64> = pred
                .values()
                .iter()
                .zip(s.gt_depth.values())
                .map(|(a, b)| (a - b).abs())
                .collect();
            let emax = err.iter().cloned().fold(0.0, f64::max).max(1e-6);
            for (name, values, r) in [
                ("pred", pred.values().to_vec(), range),
                ("gt", s.gt_depth.values().to_vec(), range),
                ("raw", s.raw_depth.sensor_values(), range),
                ("error", err, Some((0.0, emax))),
            ] {
                let target = out.join(format!("{id}_{name}.png"));
                write_heatmap(&target, &values, h, w, r)?;
                made.push(target);
            }
        }
    }
    if made.is_empty() {
        return Err(Error::MissingInput(run.join("train_log.ndjson")));
    }
    println!("wrote {} plots to {}", made.len(), out.display());
    Ok(())
}

/// Markdown reference for every subcommand, flag, exit code and config key.
pub fn reference_page() -> String {
    let mut s = String::from("# glassdepth command reference\n\n");
    s.push_str("Generated by `glassdepth show-config --format reference`.\n\n");
    s.push_str("## Global options\n\n");
    let cmd = Cli::command();
    for a in cmd.get_arguments().filter(|a| a.is_global_set()) {
        s.push_str(&arg_line(a));
    }
    s.push_str("\n## Subcommands\n\n");
    for sub in cmd.get_subcommands() {
        s.push_str(&format!("### `{}`\n\n", sub.get_name()));
        if let Some(about) = sub.get_about() {
            s.push_str(&format!("{about}\n\n"));
        }
        let args: Vec<_> = sub
            .get_arguments()
            .filter(|a| !a.is_global_set() && a.get_id() != "help")
            .collect();
        for a in &args {
            s.push_str(&arg_line(a));
        }
        if !args.is_empty() {
            s.push('\n');
        }
    }
    s.push_str("## Exit codes\n\n");
    s.push_str("| code | meaning |\n|---|---|\n");
    s.push_str("| 0 | success |\n| 1 | other failure (I/O, checkpoint, shape) |\n");
    s.push_str("| 2 | config or command-line error |\n| 3 | missing input file or directory |\n");
    s.push_str("| 4 | numerical failure (non-finite loss, solver divergence) |\n");
    s.push_str("| 5 | more than 1% of evaluated samples failed |\n\n");
    s.push_str("## Artifacts\n\n");
    s.push_str("| file | written by |\n|---|---|\n");
    for (f, by) in [
        ("config.txt", "every subcommand: resolved config, readable with `--config`"),
        ("corpus.json", "gen-data: spec, spec hash and split"),
        ("<split>/<id>/{rgb,depth_raw,depth_gt,mask}.png, meta.txt", "gen-data"),
        ("refined/<id>.{gdf,png}, solve.json", "preprocess"),
        ("codec.gdck, codec_log.ndjson, summary.json", "train-codec"),
        ("denoiser.gdck, train_log.ndjson", "train-diffusion and the ablation sub-runs"),
        ("pred/<id>.{gdf,png}", "infer"),
        ("report.json, table.txt", "eval"),
        ("steps.json, steps.txt", "ablate-steps"),
        ("condition.json, condition.txt", "ablate-condition"),
        ("*.svg, <id>_{pred,gt,raw,error}.png", "plot"),
    ] {
        s.push_str(&format!("| `{f}` | {by} |\n"));
    }
    s.push_str("\n## Config keys\n\n");
    s.push_str(&reference_table());
    s
}

fn arg_line(a: &clap::Arg) -> String {
    let name = match (a.get_long(), a.get_short()) {
        (Some(l), Some(c)) => format!("`-{c}, --{l}`"),
        (Some(l), None) => format!("`--{l}`"),
        _ => format!("`{}`", a.get_id()),
    };
    let help = a.get_help().map(|h| h.to_string()).unwrap_or_default();
    let required = if a.is_required_set() { " (required)" } else { "" };
    if help.is_empty() {
        return format!("- {name}{required}\n");
    }
    format!("- {name}{required}: {help}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn reference_mentions_every_subcommand() {
        let page = reference_page();
        for sub in Cli::command().get_subcommands() {
            assert!(page.contains(&format!("### `{}`", sub.get_name())));
        }
        assert!(page.contains("`train.lr`"));
    }

    #[test]
    fn unknown_override_exits_2() {
        assert_eq!(main_with(["glassdepth", "show-config", "--set", "nope=1"]), 2);
        assert_eq!(main_with(["glassdepth", "show-config"]), 0);
    }
}
