//! The `dp` command line: dataset generation, training, evaluation and the
//! self-check suites.

use std::ffi::OsString;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{leave_one_out_folds, load_sequences, GarmentManifest, LoadOptions, LoadedSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate_continuous, single_shot_eval, ModelClassifier};
use crate::model::{GarmentNet, ModelPreset};
use crate::synth::{generate_dataset, DatasetSpec};
use crate::train::{split_validation, train_stage1, train_stage2, EpochRecord, Stage, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dp", version, about = "Garment shape and weight classification from depth video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic grasp-and-drop dataset.
    #[command(alias = "gen")]
    Generate(GenerateArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Score a checkpoint on test sequences.
    Eval(EvalArgs),
    /// Run the self-check suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Overrides {
    /// TOML file with [model], [train] and [data] tables of overrides.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `train.epochs=5` or `data.camera.tilt_deg=20`.
    /// Wins over the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Built-in spec (`toy`, `paper`) or a TOML spec file.
    #[arg(long, default_value = "toy")]
    pub spec: String,
    #[arg(long)]
    pub seed: u64,
    /// Created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// 1 (extractor and heads) or 2 (latent predictor).
    #[arg(long)]
    pub stage: Stage,
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Leave-one-out fold to train on; every garment when absent.
    #[arg(long)]
    pub fold: Option<usize>,
    /// `toy`, `paper`, either with `-rgb`, or a preset TOML file.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long)]
    pub seed: u64,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Sliding windows through the latent predictor, averaged per sequence.
    Continuous,
    /// Every frame classified on its own.
    #[value(alias = "single_shot")]
    SingleShot,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate the held-out garments of this fold; every garment when absent.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Working directory for the regeneration suite; a temporary one when
    /// absent.
    #[arg(long)]
    pub scratch: Option<PathBuf>,
}

/// Settings after the preset, config file and `--set` layers are applied.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub model: Option<ModelPreset>,
    pub train: Option<TrainConfig>,
    pub data: Option<DatasetSpec>,
}

impl Settings {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Usage(format!("override '{key}' needs a model., train. or data. prefix")))?;
        match (section, self) {
            ("model", Settings { model: Some(m), .. }) => m.apply_override(field, value),
            ("train", Settings { train: Some(t), .. }) => t.apply_override(field, value),
            ("data", Settings { data: Some(d), .. }) => d.apply_override(field, value),
            ("model" | "train" | "data", _) => Err(Error::Usage(format!("'{section}' settings do not apply to this command"))),
            _ => Err(Error::Usage(format!("unknown settings section '{section}'"))),
        }
    }

    /// Applies the config file, then the `--set` pairs.
    pub fn layer(&mut self, overrides: &Overrides) -> Result<()> {
        if let Some(path) = &overrides.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
            for (section, body) in table {
                let toml::Value::Table(body) = body else {
                    return Err(Error::Config(format!("{}: '{section}' must be a table", path.display())));
                };
                for (k, v) in flatten(&body) {
                    self.apply(&format!("{section}.{k}"), &v)?;
                }
            }
        }
        for pair in &overrides.sets {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{pair}'")))?;
            self.apply(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// `{camera = {tilt_deg = 5}}` becomes `("camera.tilt_deg", "5")`.
fn flatten(table: &toml::Table) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (k, v) in table {
        match v {
            toml::Value::Table(inner) => out.extend(flatten(inner).into_iter().map(|(ik, iv)| (format!("{k}.{ik}"), iv))),
            toml::Value::String(s) => out.push((k.clone(), s.clone())),
            other => out.push((k.clone(), other.to_string())),
        }
    }
    out
}

fn preset_from(name: &str) -> Result<ModelPreset> {
    if name.ends_with(".toml") {
        ModelPreset::from_file(Path::new(name))
    } else {
        ModelPreset::by_name(name)
    }
}

fn spec_from(name: &str) -> Result<DatasetSpec> {
    if name.ends_with(".toml") {
        DatasetSpec::from_file(Path::new(name))
    } else {
        DatasetSpec::by_name(name)
    }
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    /// Input paths as given on the command line.
    inputs: Vec<(&'a str, String)>,
    fold: Option<usize>,
    model: Option<&'a ModelPreset>,
    train: Option<&'a TrainConfig>,
    data: Option<&'a DatasetSpec>,
}

fn write_metadata(out: &Path, meta: &RunMetadata<'_>) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("run.json");
    let body = serde_json::to_string_pretty(meta).expect("run metadata serializes");
    std::fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn load_manifest(data: &Path) -> Result<GarmentManifest> {
    GarmentManifest::load(&data.join("manifest.json"))
}

/// Train or test garment ids of `fold`, or every garment.
fn garment_ids(manifest: &GarmentManifest, fold: Option<usize>, test: bool) -> Result<Vec<String>> {
    let Some(k) = fold else {
        return Ok(manifest.garments.iter().map(|g| g.id.clone()).collect());
    };
    let folds = leave_one_out_folds(manifest)?;
    let split = folds
        .into_iter()
        .nth(k)
        .ok_or_else(|| Error::Usage(format!("fold {k} does not exist in this dataset")))?;
    Ok(if test { split.test_garment_ids } else { split.train_garment_ids })
}

fn load(manifest: &GarmentManifest, ids: &[String], preset: &ModelPreset) -> Result<Vec<LoadedSequence>> {
    load_sequences(manifest, ids, &LoadOptions::new(preset.input_size, preset.input_channels))
}

/// Generates a dataset; returns the manifest path.
pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let mut settings = Settings {
        data: Some(spec_from(&args.spec)?),
        ..Settings::default()
    };
    settings.layer(&args.overrides)?;
    let spec = settings.data.expect("set above");
    generate_dataset(&spec, &args.out, args.seed)?;
    write_metadata(
        &args.out,
        &RunMetadata {
            command: "generate",
            version: env!("CARGO_PKG_VERSION"),
            seed: Some(args.seed),
            inputs: vec![],
            fold: None,
            model: None,
            train: None,
            data: Some(&spec),
        },
    )?;
    Ok(args.out.join("manifest.json"))
}

fn describe_epoch(r: &EpochRecord) -> String {
    let mut line = format!("epoch {:>3}  lr {:.1e}  loss {:.4}  train shape {:.3}", r.epoch, r.lr, r.loss, r.train_shape_acc);
    if let Some(m) = r.mean_mse {
        line += &format!("  mse {m:.4}");
    }
    if let Some(v) = r.val_shape_acc {
        line += &format!("  val shape {v:.3}");
    }
    if let Some(v) = r.val_weight_acc {
        line += &format!("  val weight {v:.3}");
    }
    line
}

/// Runs one stage; returns (checkpoint, report) paths.
pub fn cmd_train(args: &TrainArgs) -> Result<(PathBuf, PathBuf)> {
    let mut settings = Settings {
        model: Some(preset_from(&args.preset)?),
        train: Some(TrainConfig::for_stage(args.stage, args.seed)),
        data: None,
    };
    settings.layer(&args.overrides)?;
    let (preset, cfg) = (settings.model.expect("set above"), settings.train.expect("set above"));
    if cfg.stage != args.stage {
        return Err(Error::Usage("train.stage cannot be overridden; use --stage".into()));
    }
    let net = match (args.stage, &args.init) {
        (Stage::Stage1, None) => GarmentNet::new(&preset, cfg.seed)?,
        (Stage::Stage1, Some(_)) => return Err(Error::Usage("--init applies to stage 2 only".into())),
        (Stage::Stage2, Some(init)) => GarmentNet::load(&preset, init)?,
        (Stage::Stage2, None) => {
            return Err(Error::Usage("stage 2 needs a stage-1 checkpoint; pass it with --init".into()));
        }
    };
    let manifest = load_manifest(&args.data)?;
    let sequences = load(&manifest, &garment_ids(&manifest, args.fold, false)?, &preset)?;
    let (train, val) = split_validation(&sequences, cfg.validation_sequences);
    let mut observer = |r: &EpochRecord| {
        eprintln!("{}", describe_epoch(r));
        ControlFlow::Continue(())
    };
    let outcome = match args.stage {
        Stage::Stage1 => train_stage1(&net, &train, &val, &cfg, &mut observer)?,
        Stage::Stage2 => train_stage2(&net, &train, &val, &cfg, &mut observer)?,
    };
    net.load_parameters(&outcome.best_parameters)?;

    let n = match args.stage {
        Stage::Stage1 => 1,
        Stage::Stage2 => 2,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let ckpt = args.out.join(format!("stage{n}.ckpt"));
    net.save(&ckpt)?;
    let report = args.out.join(format!("stage{n}_report.jsonl"));
    write_file(&report, &outcome.report.to_json_lines())?;
    let mut inputs = vec![("data", args.data.display().to_string())];
    if let Some(init) = &args.init {
        inputs.push(("init", init.display().to_string()));
    }
    write_metadata(
        &args.out,
        &RunMetadata {
            command: "train",
            version: env!("CARGO_PKG_VERSION"),
            seed: Some(cfg.seed),
            inputs,
            fold: args.fold,
            model: Some(&preset),
            train: Some(&cfg),
            data: None,
        },
    )?;
    eprintln!("best epoch {} of {}", outcome.report.best_epoch, outcome.report.epochs.len());
    Ok((ckpt, report))
}

/// Evaluates a checkpoint; returns the text tables that were printed.
pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let mut settings = Settings {
        model: Some(preset_from(&args.preset)?),
        ..Settings::default()
    };
    settings.layer(&args.overrides)?;
    let preset = settings.model.expect("set above");
    let net = GarmentNet::load(&preset, &args.checkpoint)?;
    let manifest = load_manifest(&args.data)?;
    let test = load(&manifest, &garment_ids(&manifest, args.fold, true)?, &preset)?;
    let classifier = ModelClassifier(&net);
    let input = if preset.input_channels == 3 { "rgb" } else { "depth" };
    let tables = match args.mode {
        EvalMode::Continuous => {
            let r = evaluate_continuous(&classifier, &test)?;
            r.write(&args.out)?;
            format!(
                "{}\n{}",
                r.shape.to_table(&format!("continuous shape accuracy (%), {input} input, {} sequences", r.shape.total)),
                r.weight.to_table(&format!("continuous weight accuracy (%), {input} input, {} sequences", r.weight.total))
            )
        }
        EvalMode::SingleShot => {
            let r = single_shot_eval(&classifier, &test)?;
            r.write(&args.out)?;
            r.tables(input)
        }
    };
    write_metadata(
        &args.out,
        &RunMetadata {
            command: match args.mode {
                EvalMode::Continuous => "eval continuous",
                EvalMode::SingleShot => "eval single-shot",
            },
            version: env!("CARGO_PKG_VERSION"),
            seed: None,
            inputs: vec![
                ("checkpoint", args.checkpoint.display().to_string()),
                ("data", args.data.display().to_string()),
            ],
            fold: args.fold,
            model: Some(&preset),
            train: None,
            data: None,
        },
    )?;
    Ok(tables)
}

/// Runs every suite, printing one line each. Fails if any suite fails.
pub fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let (scratch, temporary) = match &args.scratch {
        Some(dir) => (dir.clone(), false),
        None => (std::env::temp_dir().join(format!("dp-verify-{}", std::process::id())), true),
    };
    std::fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    let outcomes = crate::verify::run_all(&scratch);
    if temporary {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{:<22} {}  {:>8.2}s  {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.elapsed.as_secs_f64(),
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        return Err(Error::Invariant(format!("{failed} of {} suites failed", outcomes.len())));
    }
    Ok(())
}

/// Caps the rayon pool at `DP_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("DP_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size the thread pool: {e}")))
}

pub fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Generate(a) => println!("{}", cmd_generate(a)?.display()),
        Command::Train(a) => {
            let (ckpt, report) = cmd_train(a)?;
            println!("{}\n{}", ckpt.display(), report.display());
        }
        Command::Eval(a) => print!("{}", cmd_eval(a)?),
        Command::Verify(a) => cmd_verify(a)?,
    }
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dp: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(config: Option<PathBuf>, sets: &[&str]) -> Overrides {
        Overrides {
            config,
            sets: sets.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn cli_beats_file_beats_preset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "[train]\nepochs = 7\nbatch_size = 4\n[model]\nlstm_hidden = 16\n").unwrap();
        let mut s = Settings {
            model: Some(ModelPreset::toy()),
            train: Some(TrainConfig::stage1(0)),
            data: None,
        };
        s.layer(&overrides(Some(file), &["train.epochs=3"])).unwrap();
        let t = s.train.unwrap();
        assert_eq!((t.epochs, t.batch_size), (3, 4));
        assert_eq!(s.model.unwrap().lstm_hidden, 16);
        assert_eq!(TrainConfig::stage1(0).epochs, 35);
    }

    #[test]
    fn nested_data_keys_in_files() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("d.toml");
        std::fs::write(&file, "[data]\ncamera = { tilt_deg = 10.0 }\nframes_per_sequence = 20\n").unwrap();
        let mut s = Settings {
            data: Some(DatasetSpec::toy()),
            ..Settings::default()
        };
        s.layer(&overrides(Some(file), &[])).unwrap();
        let d = s.data.unwrap();
        assert_eq!((d.camera.tilt_deg, d.frames_per_sequence), (10.0, 20));
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        let mut s = Settings {
            train: Some(TrainConfig::stage1(0)),
            ..Settings::default()
        };
        assert!(matches!(s.layer(&overrides(None, &["epochs=3"])), Err(Error::Usage(_))));
        assert!(matches!(s.layer(&overrides(None, &["model.lstm_hidden=3"])), Err(Error::Usage(_))));
        assert!(matches!(s.layer(&overrides(None, &["train.epochs"])), Err(Error::Usage(_))));
        assert!(matches!(s.layer(&overrides(None, &["train.nope=1"])), Err(Error::Config(_))));
    }

    #[test]
    fn help_and_bad_flags() {
        assert_eq!(run(["dp", "--help"]), 0);
        assert_eq!(run(["dp", "train", "--stage", "3"]), 1);
        assert_eq!(run(["dp", "generate", "--out", "x"]), 1);
    }
}
