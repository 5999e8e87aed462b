//! `dcam` command line: dataset generation, training, evaluation, inference,
//! gradient checks, parameter counts and the interactive matting service.

pub mod config;
pub mod service;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcam_core::config::GuidanceMode;
use dcam_core::dataio::{generate_dataset, load_alpha, load_dataset, load_image, save_alpha, save_dataset};
use dcam_core::error::DcamError;
use dcam_core::guidance::{load_trimap, ClickSet, Payload, UNKNOWN};
use dcam_core::infer::{InferOptions, Matter};
use dcam_core::metrics::{evaluate, format_key_values, format_table, mean_report, MetricReport, Region, TableStyle};
use dcam_core::model::param_count;
use dcam_core::training::checkpoint::Checkpoint;
use dcam_core::training::eval::evaluate_scenes;
use dcam_core::training::gradcheck::{gradcheck_config, run_case, run_model_case, GradcheckOptions, GradcheckReport, MODULE_CASES};
use dcam_core::training::trainer::{train, EpochRecord, TrainOptions};
use serde::Deserialize;

use config::{ConfigFile, Mode, Preset};

/// Environment variable naming the compute device.
pub const DEVICE_ENV: &str = "DCAM_DEVICE";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl From<DcamError> for CliError {
    fn from(e: DcamError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dcam", version, about = "Universal alpha matting with guided dual-context aggregation")]
pub struct Cli {
    /// JSON file with preset, mode, model overrides and training settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-instance dataset.
    GenData(GenDataArgs),
    /// Train a network on a generated dataset.
    Train(TrainArgs),
    /// Score predicted mattes against ground truth, or a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict the alpha matte of one image.
    Infer(InferArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the number of learnable parameters.
    ParamCount(ModelArgs),
    /// Run the HTTP matting service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for checkpoints and the epoch history.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resume from these parameters.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted alpha PNGs.
    #[arg(long, requires = "gt", conflicts_with_all = ["checkpoint", "data"])]
    pub pred: Option<PathBuf>,
    /// Directory of ground-truth alpha PNGs with matching file names.
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Directory of trimaps; adds unknown-region rows.
    #[arg(long, requires = "pred")]
    pub trimap: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub data: Option<PathBuf>,
    /// Write `key=value` metric lines to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Style::Raw)]
    pub style: Style,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Style {
    Raw,
    Composition,
}

/// Click file contents: `{"positives": [[x, y], ...], "negatives": [[x, y], ...]}`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClickFile {
    #[serde(default)]
    positives: Vec<(usize, usize)>,
    #[serde(default)]
    negatives: Vec<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Must match the checkpoint's guidance mode when given.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, conflicts_with = "clicks")]
    pub trimap: Option<PathBuf>,
    /// JSON click file.
    #[arg(long)]
    pub clicks: Option<PathBuf>,
    /// Keep network output in the trimap's known regions.
    #[arg(long)]
    pub no_passthrough: bool,
    /// Output alpha PNG (16-bit grey).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Module classes to check; all when omitted.
    #[arg(long = "case")]
    pub cases: Vec<String>,
    /// Also check the assembled narrow network in this guidance mode.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Largest accepted image side.
    #[arg(long, default_value_t = service::DEFAULT_MAX_SIDE)]
    pub max_side: usize,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
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
    match execute(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

/// Only the CPU substrate exists; `cpu` and `cpu:N` are accepted.
pub fn resolve_device() -> Result<String, CliError> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok("cpu".into()),
        Ok(d) if d == "cpu" || d.strip_prefix("cpu:").is_some_and(|n| n.parse::<usize>().is_ok()) => Ok(d),
        Ok(d) => Err(CliError::Runtime(format!("{DEVICE_ENV}={d:?} is not available; this build runs on cpu"))),
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let device = resolve_device()?;
    log::debug!("device {device}");
    let file = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => run_train(&a, &file),
        Command::Eval(a) => run_eval(&a, &file),
        Command::Infer(a) => run_infer(&a),
        Command::Gradcheck(a) => run_gradcheck(&a),
        Command::ParamCount(a) => {
            println!("{}", param_count(&file.model_config(a.preset, a.mode)?)?);
            Ok(())
        }
        Command::Serve(a) => serve(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if !(1..=4).contains(&a.max_instances) {
        return Err(CliError::Usage("--max-instances must be between 1 and 4".into()));
    }
    let scenes = generate_dataset(a.count, a.seed, a.size, a.max_instances)?;
    save_dataset(&scenes, &a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs, file: &ConfigFile) -> Result<(), CliError> {
    let model = file.model_config(a.model.preset, a.model.mode)?;
    let cfg = file.train_config(a.seed);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scenes = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", a.out.display())))?;
    let init = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.params),
        None => None,
    };
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        init,
    };
    println!("{}", EpochRecord::CSV_HEADER);
    let out = train(&model, &cfg, &scenes, &opts, |r| println!("{}", r.csv_line()))?;
    log::info!("best epoch {} of {}; checkpoints in {}", out.best.epoch, out.last.epoch, a.out.display());
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Runtime(format!("no PNG files in {}", dir.display())));
    }
    Ok(names)
}

fn run_eval(a: &EvalArgs, file: &ConfigFile) -> Result<(), CliError> {
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    let mut extra = String::new();
    match (&a.pred, &a.gt, &a.checkpoint, &a.data) {
        (Some(pred_dir), Some(gt_dir), None, None) => {
            let mut whole = Vec::new();
            let mut unknown = Vec::new();
            for name in png_names(gt_dir)? {
                let gt = load_alpha(&gt_dir.join(&name))?.mapv(f64::from);
                let pred = load_alpha(&pred_dir.join(&name))?.mapv(f64::from);
                let r = evaluate(pred.view(), gt.view(), Region::Whole)?;
                whole.push(r);
                rows.push((name.clone(), r));
                if let Some(tdir) = &a.trimap {
                    let mask = load_trimap(&tdir.join(&name))?.mapv(|l| l == UNKNOWN);
                    let r = evaluate(pred.view(), gt.view(), Region::Unknown(mask.view()))?;
                    unknown.push(r);
                    rows.push((format!("{name}:unknown"), r));
                }
            }
            rows.push(("mean".into(), mean_report(&whole).expect("non-empty")));
            if let Some(m) = mean_report(&unknown) {
                rows.push(("mean:unknown".into(), m));
            }
        }
        (None, None, Some(ckpt), Some(data)) => {
            let ckpt = Checkpoint::load(ckpt)?;
            let matter = Matter::from_checkpoint(&ckpt)?;
            let scenes = load_dataset(data)?;
            let cfg = match &file.train {
                Some(t) => t.clone(),
                None => ckpt.train.clone(),
            };
            let summary = evaluate_scenes(&matter, &scenes, matter.mode(), &cfg)?;
            rows.extend(summary.scenes.iter().map(|s| (format!("scene{}", s.seed), s.report)));
            rows.push(("mean".into(), summary.mean));
            extra = format!("mean_iou={:.6} iou_pass_rate_0.8={:.4}\n", summary.mean_iou, summary.iou_pass_rate(0.8));
        }
        _ => return Err(CliError::Usage("eval needs either --pred and --gt, or --checkpoint and --data".into())),
    }
    let style = match a.style {
        Style::Raw => TableStyle::Raw,
        Style::Composition => TableStyle::Composition,
    };
    print!("{}{extra}", format_table(&rows, style));
    if let Some(out) = &a.out {
        std::fs::write(out, format_key_values(&rows) + &extra).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(())
}

fn run_infer(a: &InferArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let matter = Matter::from_checkpoint(&ckpt)?;
    let mode = matter.mode();
    if let Some(m) = a.mode {
        if GuidanceMode::from(m) != mode {
            return Err(CliError::Usage(format!("--mode {} does not match the checkpoint's mode {}", GuidanceMode::from(m).as_str(), mode.as_str())));
        }
    }
    let image = load_image(&a.image)?;
    let trimap = a.trimap.as_deref().map(load_trimap).transpose()?;
    let clicks = match &a.clicks {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
            let f: ClickFile = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid click file {}: {e}", p.display())))?;
            Some(ClickSet {
                positives: f.positives,
                negatives: f.negatives,
            })
        }
        None => None,
    };
    let payload = match (mode, &trimap, &clicks) {
        (GuidanceMode::None, None, None) => Payload::None,
        (GuidanceMode::Trimap, Some(t), None) => Payload::Trimap(t),
        (GuidanceMode::Click, None, Some(c)) => Payload::Clicks(c),
        (GuidanceMode::Click, None, None) => return Err(CliError::Usage("click mode needs --clicks".into())),
        (GuidanceMode::Trimap, None, _) => return Err(CliError::Usage("trimap mode needs --trimap".into())),
        _ => return Err(CliError::Usage(format!("guidance flags do not fit mode {}", mode.as_str()))),
    };
    let opts = InferOptions {
        known_passthrough: !a.no_passthrough,
        ..InferOptions::default()
    };
    let alpha = matter.predict(&image, payload, &opts)?;
    save_alpha(&alpha, &a.out)?;
    Ok(())
}

fn print_report(name: &str, r: &GradcheckReport) {
    let verdict = if r.passed() { "ok" } else { "FAIL" };
    println!(
        "{name:<20} max_rel_error={:.3e} tolerance={:.0e} entries={} worst={} {verdict}",
        r.max_rel_error, r.tolerance, r.entries_checked, r.worst
    );
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let cases: Vec<String> = if a.cases.is_empty() {
        MODULE_CASES.iter().map(|s| s.to_string()).collect()
    } else {
        a.cases.clone()
    };
    let mut failed = 0;
    let mut check = |name: &str, r: dcam_core::error::Result<GradcheckReport>| -> Result<(), CliError> {
        let r = r.map_err(|e| match e {
            DcamError::Config(m) => CliError::Usage(m),
            e => e.into(),
        })?;
        print_report(name, &r);
        failed += usize::from(!r.passed());
        Ok(())
    };
    for case in &cases {
        let r = match a.precision {
            Precision::F64 => run_case::<f64>(case, GradcheckOptions { seed: a.seed, ..GradcheckOptions::for_precision::<f64>() }),
            Precision::F32 => run_case::<f32>(case, GradcheckOptions { seed: a.seed, ..GradcheckOptions::for_precision::<f32>() }),
        };
        check(case, r)?;
    }
    if let Some(m) = a.mode {
        let cfg = gradcheck_config(m.into());
        let r = match a.precision {
            Precision::F64 => run_model_case::<f64>(&cfg, GradcheckOptions { seed: a.seed, ..GradcheckOptions::for_precision::<f64>() }),
            Precision::F32 => run_model_case::<f32>(&cfg, GradcheckOptions { seed: a.seed, ..GradcheckOptions::for_precision::<f32>() }),
        };
        check("model", r)?;
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let matter = Matter::from_checkpoint(&ckpt)?;
    let state = service::AppState::new(matter, a.max_side);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        log::info!("serving {} model on http://{addr}", state.mode().as_str());
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}
