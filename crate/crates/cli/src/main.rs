//! `attrikit` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use attrikit::calibration::{calibration_registry, CalibrationTable, DEFAULT_FPR_BUDGET};
use attrikit::data::{generate_synthetic, make_batch, DatasetManifest, Sample, Split, SyntheticSpec};
use attrikit::gradcheck::{primitive_suite, GradCheckOptions, REL_TOLERANCE};
use attrikit::interpret::{gradcam, overlay, sidecar_text};
use attrikit::kv::KvMap;
use attrikit::network::{load_checkpoint, Network};
use attrikit::train::{self, TrainConfig, CALIBRATION_FILE, CONFIG_FILE};
use attrikit::{Error, NetworkConfig};

#[derive(Parser)]
#[command(name = "attrikit", version, about = "Multi-label attribute recognition toolkit")]
struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic attribute dataset.
    GenData(GenData),
    /// Train a network and write checkpoint, calibration and metrics.
    Train(TrainCmd),
    /// Fit per-attribute thresholds on the train split.
    Calibrate(CalibrateCmd),
    /// Score a split with a checkpoint and calibration table.
    Eval(EvalCmd),
    /// Write GradCAM overlays for one attribute.
    Interpret(InterpretCmd),
    /// Compare tape gradients with finite differences.
    Gradcheck(GradcheckCmd),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k: Option<f64>,
}

#[derive(Args)]
struct CalibrateCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// f1, fpr or naive.
    #[arg(long, default_value = "f1")]
    method: String,
    /// FPR budget for `--method fpr`.
    #[arg(long, default_value_t = DEFAULT_FPR_BUDGET)]
    k: f64,
    /// Output table; defaults to calibration.tsv beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to calibration.tsv beside the checkpoint.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpretCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Attribute name or index.
    #[arg(long)]
    attribute: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Number of leading samples of the split to render.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,
    /// Threshold source for the verdict; defaults to calibration.tsv beside
    /// the checkpoint, or 0.5 when there is none.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Image format of the overlays.
    #[arg(long, default_value = "png", value_parser = ["png", "ppm"])]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Unknown { .. } => Failure::Usage(e.to_string()),
            e if e.is_numeric() => Failure::Numeric(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    let result = match cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train_cmd(c),
        Command::Calibrate(c) => calibrate_cmd(c),
        Command::Eval(c) => eval_cmd(c),
        Command::Interpret(c) => interpret_cmd(c),
        Command::Gradcheck(c) => gradcheck_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<KvMap, Failure> {
    match path {
        None => Ok(KvMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            Ok(KvMap::parse(&text)?)
        }
    }
}

/// The config given with `--config`, else the run's config.txt next to the
/// checkpoint, else defaults.
fn run_config(explicit: Option<&Path>, checkpoint: &Path) -> Result<KvMap, Failure> {
    let sibling = checkpoint.parent().map(|d| d.join(CONFIG_FILE));
    match (explicit, sibling) {
        (Some(p), _) => read_config(Some(p)),
        (None, Some(s)) if s.is_file() => read_config(Some(&s)),
        _ => Ok(KvMap::new()),
    }
}

fn sibling_or(explicit: Option<PathBuf>, checkpoint: &Path, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| checkpoint.with_file_name(name))
}

fn default_network(num_attributes: usize) -> NetworkConfig {
    NetworkConfig::new(8, &[1, 1, 1, 1], &[8, 16, 32, 64], num_attributes)
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    Split::parse(s).map_err(|e| Failure::Usage(e.to_string()))
}

fn load_net(path: &Path, manifest: &DatasetManifest) -> Result<Network, Failure> {
    let net = load_checkpoint(path)?;
    let (m, want) = (net.config().num_attributes, manifest.num_attributes());
    if m != want {
        return Err(Failure::Data(format!("checkpoint predicts {m} attributes, manifest has {want}")));
    }
    Ok(net)
}

fn gen_data(c: GenData) -> Outcome {
    let kv = read_config(c.common.config.as_deref())?;
    let mut spec = SyntheticSpec::from_kv_with(&kv, &SyntheticSpec::standard(0))?;
    spec.seed = c.seed.unwrap_or(spec.seed);
    spec.train = c.train.unwrap_or(spec.train);
    spec.val = c.val.unwrap_or(spec.val);
    spec.test = c.test.unwrap_or(spec.test);
    let manifest = generate_synthetic(&spec, &c.out)?;
    info!("wrote {} images with {} attributes to {}", manifest.records().len(), manifest.num_attributes(), c.out.display());
    Ok(())
}

fn train_cmd(c: TrainCmd) -> Outcome {
    let mut kv = read_config(c.common.config.as_deref())?;
    if let Some(e) = c.epochs {
        kv.set("epochs", e);
    }
    if let Some(s) = c.seed {
        kv.set("seed", s);
    }
    if let Some(m) = &c.method {
        kv.set("calibration", m);
    }
    if let Some(k) = c.k {
        kv.set("k", k);
    }
    let manifest = DatasetManifest::load(&c.manifest)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let net_cfg = NetworkConfig::from_kv_with(&kv, &default_network(manifest.num_attributes()))?;
    let run = train::train(&manifest, &net_cfg, &cfg, &c.out)?;
    info!("best epoch {}; checkpoint {}", run.best_epoch, run.checkpoint.display());
    for (split, path) in &run.metrics {
        info!("{split} metrics in {}", path.display());
    }
    Ok(())
}

fn calibrate_cmd(c: CalibrateCmd) -> Outcome {
    let cfg = TrainConfig::from_kv(&run_config(c.common.config.as_deref(), &c.checkpoint)?)?;
    let manifest = DatasetManifest::load(&c.manifest)?;
    let net = load_net(&c.checkpoint, &manifest)?;
    let mut opts = KvMap::new();
    opts.set("k", c.k);
    let strategy = calibration_registry().create(&c.method, &opts)?;
    let train_data = manifest.train().load()?;
    let table = train::calibrate(&net, &train_data, &cfg.augmentation, strategy.as_ref(), cfg.eval_batch_size)?;
    let out = sibling_or(c.out, &c.checkpoint, CALIBRATION_FILE);
    table.save(&out)?;
    info!("{} thresholds written to {}", c.method, out.display());
    Ok(())
}

fn eval_cmd(c: EvalCmd) -> Outcome {
    let cfg = TrainConfig::from_kv(&run_config(c.common.config.as_deref(), &c.checkpoint)?)?;
    let split = parse_split(&c.split)?;
    let manifest = DatasetManifest::load(&c.manifest)?;
    let net = load_net(&c.checkpoint, &manifest)?;
    let table = CalibrationTable::load(sibling_or(c.calibration, &c.checkpoint, CALIBRATION_FILE))?;
    let data = manifest.split(split).load()?;
    if data.is_empty() {
        return Err(Failure::Data(format!("{split} split is empty")));
    }
    let report = train::evaluate(&net, &data, &table, &cfg.augmentation, cfg.eval_batch_size)?;
    let meta = net.metadata();
    let (hash, seed) = (meta.get("config_hash").unwrap_or("unknown"), meta.parsed_or("seed", 0u64)?);
    match c.out {
        Some(path) => train::write_report(&report, split, hash, seed, &path)?,
        None => print!("{}\n{}", report.summary_text(), report.attribute_table()),
    }
    Ok(())
}

fn resolve_attribute(names: &[String], arg: &str) -> Result<usize, Failure> {
    if let Some(i) = names.iter().position(|n| n == arg) {
        return Ok(i);
    }
    match arg.parse::<usize>() {
        Ok(i) if i < names.len() => Ok(i),
        _ => Err(Failure::Usage(format!("unknown attribute `{arg}`; known: {}", names.join(", ")))),
    }
}

fn interpret_cmd(c: InterpretCmd) -> Outcome {
    let cfg = TrainConfig::from_kv(&run_config(c.common.config.as_deref(), &c.checkpoint)?)?;
    let split = parse_split(&c.split)?;
    let manifest = DatasetManifest::load(&c.manifest)?;
    let net = load_net(&c.checkpoint, &manifest)?;
    let m = resolve_attribute(manifest.attributes(), &c.attribute)?;
    let name = &manifest.attributes()[m];
    let calibration = sibling_or(c.calibration, &c.checkpoint, CALIBRATION_FILE);
    let threshold = if calibration.is_file() { CalibrationTable::load(&calibration)?.thresholds()[m] } else { 0.5 };
    let data = manifest.split(split).load()?;
    let policy = cfg.augmentation.policy()?;
    fs::create_dir_all(&c.out).map_err(Error::from)?;
    for i in 0..data.len().min(c.samples) {
        let sample = [Sample { image: &data.images()[i], labels: data.labels().row(i) }];
        let (x, _) = make_batch(&sample, policy.as_ref(), &cfg.augmentation, data.mean(), None)?;
        let heat = gradcam(&net, &x, m)?;
        // the overlay is drawn on the network's view of the image
        let view = policy.apply(&data.images()[i], policy.eval_side(), data.mean(), None)?;
        let stem = Path::new(&data.paths()[i]).file_stem().and_then(|s| s.to_str()).unwrap_or("sample").to_string();
        let base = c.out.join(format!("{stem}_{name}"));
        attrikit::data::write_image(&overlay(&view, &heat, c.alpha)?, &base.with_extension(&c.format))?;
        fs::write(base.with_extension("txt"), sidecar_text(&heat, name, threshold)).map_err(Error::from)?;
    }
    info!("wrote {} overlays for {name} to {}", data.len().min(c.samples), c.out.display());
    Ok(())
}

fn gradcheck_cmd(c: GradcheckCmd) -> Outcome {
    let kv = read_config(c.common.config.as_deref())?;
    let opts = GradCheckOptions {
        epsilon: kv.parsed_or("epsilon", GradCheckOptions::default().epsilon)?,
        ..GradCheckOptions::default()
    };
    let tolerance = kv.parsed_or("tolerance", REL_TOLERANCE)?;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for seed in 0..c.seeds {
        for r in primitive_suite(seed, &opts)? {
            worst = worst.max(r.max_rel_error);
            if !r.passed(tolerance) {
                failed.push(format!("{} (seed {seed}): {:.3e}", r.name, r.max_rel_error));
            }
        }
    }
    println!("seeds={} worst_rel_error={worst:.3e} tolerance={tolerance}", c.seeds);
    if failed.is_empty() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradcheck failed: {}", failed.join("; "))))
    }
}
