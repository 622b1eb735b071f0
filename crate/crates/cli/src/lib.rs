//! The `ccir` command line.
//!
//! Exit codes: 0 success (and `--help`), 1 usage error, 2 data or
//! validation error.

pub mod bench;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use thiserror::Error;

use ccir_core::codec::{decode_events, encode_events, read_csv, write_csv};
use ccir_core::dataset::build_dataset;
use ccir_core::imaging::{decode_image, encode_image, to_pgm};
use ccir_core::labels::make_label;
use ccir_core::metrics::evaluate;
use ccir_core::simulator::simulate;
use ccir_core::{AngularImage, EventList, SourceSpec};
use ccir_net::gradcheck::{grad_check, GradCheckOptions};
use ccir_net::infer::infer_patched;
use ccir_net::model::Network;
use ccir_net::train::{load_training_set, train};

use crate::config::{load_config, parse_override, RunConfig};
use crate::report::{FileDigest, Report};

/// Largest relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config { .. } | CliError::Data(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ccir", version, about = "Compton camera imaging workbench")]
pub struct Cli {
    /// Run configuration (JSON); every field is optional.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set recon.mlem_iters=40`.
    #[arg(long = "set", global = true, value_name = "PATH=JSON")]
    pub set: Vec<String>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Also write the JSON run report here.
    #[arg(long, global = true, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a list-mode event file.
    Simulate(SimulateArgs),
    /// Simulate a labelled dataset with a manifest.
    Dataset(DatasetArgs),
    /// Reconstruct an image with a classical algorithm.
    Reconstruct(ReconstructArgs),
    /// Render the label image of point sources.
    Label(LabelArgs),
    /// Compare an image against a label.
    Metrics(MetricsArgs),
    /// Train the network on a dataset.
    Train(TrainArgs),
    /// Image an event file with trained weights.
    Infer(InferArgs),
    /// Check the network's analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare the algorithms on simulated samples.
    Bench(BenchArgs),
    /// Event file utilities.
    #[command(subcommand)]
    Events(EventsCommand),
}

#[derive(Debug, Subcommand)]
pub enum EventsCommand {
    /// Convert between the binary event format and CSV, by file extension.
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    Sbp,
    Soe,
    Mlem,
}

impl Algo {
    fn name(self) -> &'static str {
        match self {
            Algo::Sbp => "sbp",
            Algo::Soe => "soe",
            Algo::Mlem => "mlem",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub events: usize,
    /// `PHI,COSPOLAR[,INTENSITY]` with PHI in radians; repeatable. Drawn at random when absent.
    #[arg(long = "source", value_name = "SPEC")]
    pub sources: Vec<String>,
    /// Disable pixelation and energy noise.
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Label grid side.
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, value_enum)]
    pub algo: Algo,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// MLEM iterations or SOE moves.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Also write a PGM preview.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `PHI,COSPOLAR[,INTENSITY]` with PHI in radians; repeatable.
    #[arg(long = "source", value_name = "SPEC", required = true)]
    pub sources: Vec<String>,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Gaussian width, degrees.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub label: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Binarization threshold for the Dice score; defaults to the loss threshold.
    #[arg(long)]
    pub t: Option<f64>,
    /// Scale the image to a peak of 1 first.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Weights file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 240)]
    pub coords: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub events: usize,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Include the network with these weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the exit code.
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
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8], report: &mut Report) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    report.outputs.push(FileDigest::of(path, bytes));
    Ok(())
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load_events(path: &Path, cfg: &RunConfig, report: &mut Report) -> Result<EventList, CliError> {
    let bytes = read(path)?;
    report.inputs.push(FileDigest::of(path, &bytes));
    let parsed = if is_csv(path) {
        let text = String::from_utf8(bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        read_csv(&text, cfg.camera.gap_mm)
    } else {
        decode_events(&bytes)
    };
    parsed.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_image(path: &Path, report: &mut Report) -> Result<AngularImage, CliError> {
    let bytes = read(path)?;
    report.inputs.push(FileDigest::of(path, &bytes));
    decode_image(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_weights(path: &Path, report: &mut Report) -> Result<Network<f32>, CliError> {
    let bytes = read(path)?;
    report.inputs.push(FileDigest::of(path, &bytes));
    Network::from_bytes(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Parses `PHI,COSPOLAR[,INTENSITY]`.
pub fn parse_source(text: &str) -> Result<SourceSpec, CliError> {
    let nums: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("source {text:?} must be PHI,COSPOLAR[,INTENSITY]")))?;
    let mut s = match nums.as_slice() {
        [phi, c] | [phi, c, _] => SourceSpec::new(*phi, *c),
        _ => return Err(CliError::Usage(format!("source {text:?} must be PHI,COSPOLAR[,INTENSITY]"))),
    };
    if let Some(&i) = nums.get(2) {
        s.intensity = i;
    }
    Ok(s)
}

fn grid_override(n: Option<usize>) -> Option<(String, Value)> {
    n.map(|n| ("/grid".to_string(), json!({ "width": n, "height": n })))
}

/// Flag overrides owned by each subcommand, applied after `--set`.
fn command_overrides(cmd: &Command) -> Vec<(String, Value)> {
    let mut o = Vec::new();
    match cmd {
        Command::Simulate(a) if a.noiseless => {
            o.push(("/sim/apply_pixelation".into(), json!(false)));
            o.push(("/sim/apply_energy_noise".into(), json!(false)));
        }
        Command::Dataset(a) => o.extend(grid_override(a.grid)),
        Command::Reconstruct(a) => {
            o.extend(grid_override(a.grid));
            match (a.algo, a.iters) {
                (Algo::Mlem, Some(n)) => o.push(("/recon/mlem_iters".into(), json!(n))),
                (Algo::Soe, Some(n)) => o.push(("/recon/soe_iters".into(), json!(n))),
                _ => {}
            }
        }
        Command::Label(a) => {
            o.extend(grid_override(a.grid));
            if let Some(s) = a.sigma {
                o.push(("/label_sigma_deg".into(), json!(s)));
            }
        }
        Command::Train(a) => {
            if let Some(n) = a.steps {
                o.push(("/train/max_steps".into(), json!(n)));
            }
        }
        Command::Bench(a) => o.extend(grid_override(a.grid)),
        _ => {}
    }
    o
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut overrides = Vec::new();
    for s in &cli.set {
        overrides.push(parse_override(s)?);
    }
    overrides.extend(command_overrides(&cli.command));
    if let Some(seed) = cli.seed {
        overrides.push(("/seed".into(), json!(seed)));
    }
    if let Some(w) = cli.workers {
        overrides.push(("/workers".into(), json!(w)));
    }
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Data(format!("thread pool: {e}")))?;
    let report = pool.install(|| dispatch(&cli.command, &cfg))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(path) = &cli.report {
        fs::write(path, &text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    let _ = std::io::stdout().write_all(text.as_bytes());
    if let Some(failure) = report_failure(&report) {
        return Err(CliError::Data(failure));
    }
    Ok(())
}

/// Commands whose result is a verdict fail after printing their report.
fn report_failure(report: &Report) -> Option<String> {
    if report.command == "gradcheck" && report.results["passed"] == json!(false) {
        return Some(format!("gradient check exceeded {GRADCHECK_TOLERANCE}"));
    }
    None
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<Report, CliError> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a, cfg),
        Command::Dataset(a) => cmd_dataset(a, cfg),
        Command::Reconstruct(a) => cmd_reconstruct(a, cfg),
        Command::Label(a) => cmd_label(a, cfg),
        Command::Metrics(a) => cmd_metrics(a, cfg),
        Command::Train(a) => cmd_train(a, cfg),
        Command::Infer(a) => cmd_infer(a, cfg),
        Command::Gradcheck(a) => cmd_gradcheck(a, cfg),
        Command::Bench(a) => cmd_bench(a, cfg),
        Command::Events(EventsCommand::Convert(a)) => cmd_convert(a, cfg),
    }
}

fn write_events(path: &Path, list: &EventList, report: &mut Report) -> Result<(), CliError> {
    if is_csv(path) {
        write(path, write_csv(list).as_bytes(), report)
    } else {
        write(path, &encode_events(list), report)
    }
}

fn cmd_simulate(a: &SimulateArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("simulate", cfg);
    let sources = if a.sources.is_empty() {
        cfg.dataset.draw(cfg.seed, 0).0
    } else {
        a.sources.iter().map(|s| parse_source(s)).collect::<Result<_, _>>()?
    };
    let list = simulate(&cfg.camera, &sources, a.events, &cfg.sim).map_err(|e| CliError::Data(e.to_string()))?;
    write_events(&a.out, &list, &mut report)?;
    report.results = json!({ "n_events": list.len(), "sources": sources });
    Ok(report)
}

fn cmd_dataset(a: &DatasetArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("dataset", cfg);
    let manifest = build_dataset(
        &cfg.camera,
        &cfg.dataset,
        a.samples,
        &cfg.sim,
        cfg.grid,
        cfg.label_sigma_deg,
        &a.out,
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    let path = a.out.join(ccir_core::dataset::MANIFEST_FILE);
    let bytes = read(&path)?;
    report.outputs.push(FileDigest::of(&path, &bytes));
    let total: usize = manifest.samples.iter().map(|s| s.n_events).sum();
    report.results = json!({ "n_samples": manifest.samples.len(), "n_events": total, "manifest": path });
    Ok(report)
}

fn write_image(path: &Path, pgm: Option<&Path>, img: &AngularImage, report: &mut Report) -> Result<(), CliError> {
    write(path, &encode_image(img), report)?;
    if let Some(p) = pgm {
        write(p, &to_pgm(img), report)?;
    }
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("reconstruct", cfg);
    let list = load_events(&a.input, cfg, &mut report)?;
    let (img, rec) = bench::reconstruct(cfg, a.algo.name(), &list, cfg.grid, cfg.seed)?;
    write_image(&a.out, a.pgm.as_deref(), &img, &mut report)?;
    report.results = json!({ "algorithm": a.algo.name(), "events_in": list.len(), "recon": rec });
    Ok(report)
}

fn cmd_label(a: &LabelArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("label", cfg);
    let sources: Vec<SourceSpec> = a.sources.iter().map(|s| parse_source(s)).collect::<Result<_, _>>()?;
    let img = make_label(&sources, cfg.label_sigma_deg, cfg.grid);
    write(&a.out, &encode_image(&img), &mut report)?;
    report.results = json!({ "sources": sources, "argmax": img.argmax() });
    Ok(report)
}

fn cmd_metrics(a: &MetricsArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("metrics", cfg);
    let label = load_image(&a.label, &mut report)?;
    let mut img = load_image(&a.image, &mut report)?;
    if a.normalize {
        img = img.normalized_to_peak();
    }
    let t = a.t.unwrap_or(cfg.train.loss.t);
    let m = evaluate(&label, &img, t).map_err(|e| CliError::Data(e.to_string()))?;
    report.results = serde_json::to_value(m).expect("metrics serialize");
    Ok(report)
}

fn cmd_train(a: &TrainArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("train", cfg);
    let manifest_bytes = read(&a.dataset)?;
    report.inputs.push(FileDigest::of(&a.dataset, &manifest_bytes));
    let (samples, sigma) = load_training_set(&a.dataset).map_err(|e| CliError::Data(e.to_string()))?;
    let init = match &a.init {
        Some(p) => Some(load_weights(p, &mut report)?),
        None => None,
    };
    if let Some(net) = &init {
        if net.cfg != cfg.network {
            return Err(CliError::Data(format!(
                "{}: stored network config differs from /network",
                a.init.as_ref().expect("init given").display()
            )));
        }
    }
    let mut log_file = match &a.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut log_err = None;
    let mut on_record = |rec: &ccir_net::train::LogRecord| {
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(rec).expect("record serializes") + "\n";
            if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
                log_err.get_or_insert(e);
            }
        }
    };
    let out = train(&samples, sigma, &cfg.network, &cfg.train, init, &mut on_record)
        .map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(e) = log_err {
        return Err(CliError::Data(format!("training log: {e}")));
    }
    write(&a.out, &out.net.to_bytes(), &mut report)?;
    if let Some(p) = &a.log {
        let bytes = read(p)?;
        report.outputs.push(FileDigest::of(p, &bytes));
    }
    let last_val = out.log.iter().rev().find_map(|r| r.val_psnr);
    report.results = json!({
        "steps": out.log.len(),
        "final": out.log.last(),
        "last_val_psnr": last_val,
        "n_train": out.train_ids.len(),
        "val_ids": out.val_ids,
    });
    Ok(report)
}

fn cmd_infer(a: &InferArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("infer", cfg);
    let net = load_weights(&a.weights, &mut report)?;
    let list = load_events(&a.input, cfg, &mut report)?;
    let (img, patches) = infer_patched(&net, &list).map_err(|e| CliError::Data(e.to_string()))?;
    write_image(&a.out, a.pgm.as_deref(), &img, &mut report)?;
    report.results = json!({ "patch_counts": patches.counts, "network": net.cfg });
    Ok(report)
}

fn cmd_gradcheck(a: &GradcheckArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("gradcheck", cfg);
    let opts = GradCheckOptions {
        coords: a.coords,
        ..GradCheckOptions::default()
    };
    let tiny = ccir_net::config::NetworkConfig::tiny();
    let runs = a
        .seeds
        .iter()
        .map(|&s| grad_check(&tiny, s, &opts))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let worst = runs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    report.results = json!({
        "max_rel_error": worst,
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": worst < GRADCHECK_TOLERANCE,
        "runs": runs,
    });
    Ok(report)
}

fn cmd_bench(a: &BenchArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("bench", cfg);
    let net = match &a.weights {
        Some(p) => Some(load_weights(p, &mut report)?),
        None => None,
    };
    let rows = bench::run_bench(cfg, a.samples, a.events, net.as_ref())?;
    report.results = json!({ "samples": a.samples, "events": a.events, "table": rows });
    Ok(report)
}

fn cmd_convert(a: &ConvertArgs, cfg: &RunConfig) -> Result<Report, CliError> {
    let mut report = Report::new("events convert", cfg);
    let list = load_events(&a.input, cfg, &mut report)?;
    write_events(&a.out, &list, &mut report)?;
    report.results = json!({ "n_events": list.len() });
    Ok(report)
}
