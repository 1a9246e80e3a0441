//! Command-line surface: `train`, `evaluate`, `sweep`, `inspect`, `bits`.
//!
//! Every artifact lands in the output directory and carries the run seed
//! and config hash.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{self, parse_grid, SweepSpec};
use crate::io::report::{
    histogram_csv, history_csv, json_report, sweep_csv, write_atomic, Provenance,
};
use crate::io::{
    load_checkpoint, save_checkpoint, Checkpoint, Dataset, ExperimentConfig, TrainState,
};
use crate::metrics::{bits_report, layer_diagnostics};
use crate::projections::{ProjectionKind, ProjectionSpec};
use crate::trainer::{eval_seed, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "robustproj",
    version,
    about = "Train and stress-test networks with projected weights"
)]
pub struct Cli {
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sequential evaluation (`true`) or parallel (`false`).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write checkpoint.bin, history.csv and config.toml.
    Train(TrainArgs),
    /// Test error under each distortion, written to evaluate.json.
    Evaluate(EvalArgs),
    /// Error across a grid of distortion strengths.
    Sweep(SweepArgs),
    /// Per-layer weight gaps, activation correlations and histograms.
    Inspect(InspectArgs),
    /// Effective bits per weight under additive or multiplicative noise.
    Bits(BitsArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named setup, e.g. `tr-sign-c` or `cifar-tr-none-nc`.
    #[arg(long)]
    pub preset: Option<String>,
    /// `key.path=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint holding training state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Distortion, e.g. `sign` or `addnorm:0.3`; repeatable. Defaults to the
    /// config's evaluation list.
    #[arg(long = "spec")]
    pub specs: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub kind: ProjectionKind,
    /// `start:stop:count` or a comma list; defaults to the kind's usual range.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value = "sign")]
    pub spec: String,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Test samples used for activation correlations.
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct BitsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// AddNorm noise level.
    #[arg(long, conflicts_with = "spec")]
    pub sigma: Option<f64>,
    /// `addnorm:<sigma>` or `multunif:<gamma>`.
    #[arg(long)]
    pub spec: Option<String>,
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns the artifacts written.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Inspect(a) => inspect(cli, a),
        Command::Bits(a) => bits(cli, a),
    }
}

fn split_override(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Usage(format!("override `{raw}` is not KEY=VALUE")))
}

/// Resolves the experiment config from flags, falling back to `echo`.
fn resolve_config(
    cli: &Cli,
    args: &ConfigArgs,
    echo: Option<&str>,
    extra: &[(String, String)],
) -> Result<ExperimentConfig> {
    let text = match (&args.config, &args.preset, echo) {
        (Some(path), _, _) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        (None, Some(name), _) => ExperimentConfig::preset(name)?.to_toml(),
        (None, None, Some(echo)) => echo.to_string(),
        (None, None, None) => {
            return Err(Error::Usage(
                "one of --config or --preset is required".into(),
            ))
        }
    };
    let mut overrides = args
        .overrides
        .iter()
        .map(|s| split_override(s))
        .collect::<Result<Vec<_>>>()?;
    overrides.extend_from_slice(extra);
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(d) = cli.deterministic {
        overrides.push(("train.deterministic".into(), d.to_string()));
    }
    if let Some(dir) = &cli.out_dir {
        overrides.push(("output_dir".into(), toml_string(dir)));
    }
    ExperimentConfig::from_toml_with_overrides(&text, &overrides)
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<Vec<PathBuf>> {
    let resumed = a.resume.as_ref().map(load_checkpoint).transpose()?;
    let mut extra = Vec::new();
    if let Some(n) = a.epochs {
        extra.push(("train.epochs".to_string(), n.to_string()));
    }
    let echo = resumed.as_ref().and_then(|c| c.config.as_deref());
    let cfg = resolve_config(cli, &a.cfg, echo, &extra)?;
    if let Some(w) = cfg.train.projection_warning() {
        eprintln!("warning: {w}");
    }
    let (train_ds, test_ds) = cfg.data.load()?;
    let mut trainer = match resumed {
        Some(ckpt) => {
            let state = ckpt
                .train_state
                .ok_or_else(|| Error::input("checkpoint has no training state to resume from"))?;
            Trainer::resume(
                ckpt.network,
                cfg.train_config(),
                state.opt,
                state.step,
                state.epoch,
            )?
        }
        None => Trainer::new(cfg.init_network()?, cfg.train_config())?,
    };
    let out = cfg.output_dir.clone();
    let prov = cfg.provenance();
    let config_text = cfg.to_toml();
    let mut written = Vec::new();
    let every = cfg.checkpoint_every as u64;
    let history = trainer.fit_with(&train_ds, &test_ds, &cfg.eval.specs, |t| {
        if every > 0 && t.epoch % every == 0 && t.epoch < t.config.epochs as u64 {
            let path = out.join(format!("checkpoint-epoch{:04}.bin", t.epoch));
            save_checkpoint(&snapshot(t, &config_text), &path)?;
            eprintln!("epoch {}: wrote {}", t.epoch, path.display());
        }
        Ok(())
    })?;
    for r in &history.records {
        let errs: Vec<String> = history
            .specs
            .iter()
            .zip(&r.errors)
            .map(|(s, e)| format!("te_{}={:.4}", s.label(), e))
            .collect();
        eprintln!(
            "epoch {} iter {} loss {:.5} {}",
            r.epoch,
            r.iteration,
            r.loss,
            errs.join(" ")
        );
    }
    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&snapshot(&trainer, &config_text), &ckpt)?;
    written.push(ckpt);
    let hist = out.join("history.csv");
    write_atomic(&hist, &history_csv(&history, &prov)?)?;
    written.push(hist);
    let conf = out.join("config.toml");
    write_atomic(&conf, config_text.as_bytes())?;
    written.push(conf);
    Ok(written)
}

fn snapshot(t: &Trainer, config_text: &str) -> Checkpoint {
    Checkpoint {
        network: t.net.clone(),
        config: Some(config_text.to_string()),
        train_state: Some(TrainState {
            step: t.step,
            epoch: t.epoch,
            opt: t.opt.clone(),
        }),
    }
}

struct Loaded {
    ckpt: Checkpoint,
    cfg: ExperimentConfig,
    train: Dataset,
    test: Dataset,
}

fn load_for_analysis(cli: &Cli, checkpoint: &Path, args: &ConfigArgs) -> Result<Loaded> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = resolve_config(cli, args, ckpt.config.as_deref(), &[])?;
    if cfg.model.layers != ckpt.network.layers || cfg.model.input != ckpt.network.input_shape {
        return Err(Error::config(
            "config architecture does not match the checkpoint",
        ));
    }
    let (train, test) = cfg.data.load()?;
    Ok(Loaded {
        ckpt,
        cfg,
        train,
        test,
    })
}

fn parse_spec(s: &str) -> Result<ProjectionSpec> {
    s.parse::<ProjectionSpec>()
        .map_err(|e| Error::Usage(e.to_string()))
}

#[derive(Serialize)]
struct EvalEntry {
    spec: ProjectionSpec,
    error: f64,
    distortion_seed: u64,
}

#[derive(Serialize)]
struct EvalData {
    checkpoint: String,
    epoch: u64,
    results: Vec<EvalEntry>,
}

/// Seeds follow the training-time evaluation, so evaluating the config's
/// spec list on a final checkpoint reproduces the last history row.
fn evaluate(cli: &Cli, a: &EvalArgs) -> Result<Vec<PathBuf>> {
    let l = load_for_analysis(cli, &a.checkpoint, &a.cfg)?;
    let specs = if a.specs.is_empty() {
        l.cfg.eval.specs.clone()
    } else {
        a.specs
            .iter()
            .map(|s| parse_spec(s))
            .collect::<Result<_>>()?
    };
    let epoch = l.ckpt.train_state.as_ref().map_or(0, |s| s.epoch);
    let mut results = Vec::new();
    for (i, spec) in specs.into_iter().enumerate() {
        let distortion_seed = eval_seed(l.cfg.seed, epoch, i);
        let error = harness::evaluate(&l.ckpt.network, &spec, &l.train, &l.test, distortion_seed)?;
        println!("te_{} {:.6}", spec.label(), error);
        results.push(EvalEntry {
            spec,
            error,
            distortion_seed,
        });
    }
    let data = EvalData {
        checkpoint: a.checkpoint.display().to_string(),
        epoch,
        results,
    };
    let path = l.cfg.output_dir.join("evaluate.json");
    write_atomic(&path, &json_report("evaluate", &data, &l.cfg.provenance())?)?;
    Ok(vec![path])
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<Vec<PathBuf>> {
    let l = load_for_analysis(cli, &a.checkpoint, &a.cfg)?;
    let mut sw = match &a.grid {
        Some(g) => SweepSpec::new(a.kind, parse_grid(g)?, l.cfg.seed),
        None => SweepSpec::with_default_grid(a.kind, l.cfg.seed)?,
    };
    sw.trials = a.trials;
    sw.validate()?;
    let report = harness::sweep(&l.ckpt.network, &sw, &l.train, &l.test, &l.cfg.name)?;
    for p in &report.points {
        println!(
            "{} {:.6} {:.6} {}",
            p.parameter, p.mean_error, p.std_error, p.trials
        );
    }
    let prov = l.cfg.provenance();
    let stem = format!("sweep_{}", a.kind.name());
    let csv_path = l.cfg.output_dir.join(format!("{stem}.csv"));
    write_atomic(&csv_path, &sweep_csv(&report, &prov)?)?;
    let json_path = l.cfg.output_dir.join(format!("{stem}.json"));
    write_atomic(&json_path, &json_report("sweep", &report, &prov)?)?;
    Ok(vec![csv_path, json_path])
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Result<Vec<PathBuf>> {
    let l = load_for_analysis(cli, &a.checkpoint, &a.cfg)?;
    let spec = parse_spec(&a.spec)?;
    let batch = l.test.head(a.batch.max(1));
    let diags = layer_diagnostics(
        &l.ckpt.network,
        &spec,
        &batch.images,
        &l.train.images,
        a.bins,
    )?;
    let prov = l.cfg.provenance();
    let mut written = Vec::new();
    #[derive(Serialize)]
    struct InspectData<'a> {
        spec: &'a ProjectionSpec,
        layers: &'a [crate::metrics::LayerDiagnostics],
    }
    let path = l.cfg.output_dir.join("inspect.json");
    write_atomic(
        &path,
        &json_report(
            "inspect",
            &InspectData {
                spec: &spec,
                layers: &diags,
            },
            &prov,
        )?,
    )?;
    written.push(path);
    for d in &diags {
        let p = l
            .cfg
            .output_dir
            .join(format!("histogram_layer{}.csv", d.layer));
        write_atomic(&p, &histogram_csv(&d.histogram, &prov)?)?;
        written.push(p);
        let corr = d
            .correlation
            .map_or("undefined".to_string(), |c| format!("{c:.6}"));
        println!(
            "layer {} gap {:.6} correlation {}",
            d.layer, d.mean_abs_gap, corr
        );
    }
    Ok(written)
}

fn bits(cli: &Cli, a: &BitsArgs) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let spec = match (&a.sigma, &a.spec) {
        (Some(s), None) => ProjectionSpec::AddNorm { sigma: *s },
        (None, Some(s)) => parse_spec(s)?,
        (None, None) => return Err(Error::Usage("one of --sigma or --spec is required".into())),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let report = bits_report(&ckpt.network, &spec)?;
    let (prov, out) = match ckpt.config.as_deref() {
        Some(text) => {
            let cfg = resolve_config(
                cli,
                &ConfigArgs {
                    config: None,
                    preset: None,
                    overrides: Vec::new(),
                },
                Some(text),
                &[],
            )?;
            (cfg.provenance(), cfg.output_dir)
        }
        None => (
            Provenance {
                seed: cli.seed.unwrap_or(0),
                config_hash: "none".into(),
            },
            cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
        ),
    };
    println!(
        "weighted {} pooled {}",
        fmt_bits(report.weighted_bits),
        fmt_bits(report.pooled_bits)
    );
    let path = out.join(format!("bits_{}.json", spec.label()));
    write_atomic(&path, &json_report("bits", &report, &prov)?)?;
    Ok(vec![path])
}

fn fmt_bits(b: f64) -> String {
    if b.is_infinite() {
        "inf".into()
    } else {
        format!("{b:.6}")
    }
}
