//! Command-line entry points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{image_dims, load_sample, save_map_png, DatasetDir, RgbdSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dirs, MetricsReport, SampleMetrics, THRESHOLDS};
use crate::model::{build_variant, Variant};
use crate::synth::{self, SynthConfig};
use crate::tensor::Map;
use crate::trainer::{self, write_loss_csv, TrainOutcome};

/// Set to anything but `0` to leave timestamps out of run manifests.
pub const DETERMINISTIC_ENV: &str = "RGBD_SOD_DETERMINISTIC";

pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "rgbd-sod", version, about = "RGB-D salient object detection: training, inference and evaluation")]
#[command(after_help = "Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.\n\
Set RGBD_SOD_DETERMINISTIC=1 to omit timestamps from run manifests.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes best.ckpt, last.ckpt, loss.csv and train_metrics.json.
    Train(TrainArgs),
    /// Predict saliency maps as 8-bit PNGs.
    Infer(InferArgs),
    /// Score prediction maps against ground truth; writes JSON and CSV reports.
    Eval(EvalArgs),
    /// Train and score ablation variants, then write a comparison table.
    Ablate(AblateArgs),
    /// Write a synthetic RGB-D dataset.
    GenSynth(GenSynthArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Ablation preset (A-F), applied after the config file.
    #[arg(long)]
    pub variant: Option<String>,
    /// Override one key, e.g. `--set lr=1e-6`; applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.variant.is_none() && self.overrides.is_empty()
    }

    /// Desk defaults, then the file, then the preset, then `--set`.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.variant {
            cfg.variant = cfg.variant.with_variant(v.parse()?);
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root with rgb/, depth/ and gt/.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset root with rgb/ and depth/.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Also write coarse maps to coarse_rgb/ and coarse_d/.
    #[arg(long)]
    pub emit_coarse: bool,
    /// Resize maps back to each input image's resolution.
    #[arg(long)]
    pub upsample: bool,
    /// Expected configuration; loading is refused if the checkpoint differs.
    #[command(flatten)]
    pub expect: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of prediction maps.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Directory of ground-truth masks with matching file stems.
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Report name; defaults to the ground truth's parent directory name.
    #[arg(long)]
    pub name: Option<String>,
    /// Min-max normalize each prediction before scoring.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Base configuration; the variant keys are set per row.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training dataset.
    #[arg(long, value_name = "DIR")]
    pub train: PathBuf,
    /// Evaluation dataset. Repeatable; the training set is always scored.
    #[arg(long = "eval", value_name = "DIR")]
    pub eval: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Comma-separated variants.
    #[arg(long, default_value = "A,C,D,E,F")]
    pub variants: String,
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Files and directories created by a command, removed again on failure.
struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self> {
        let mut out = Outputs {
            root: root.to_path_buf(),
            files: Vec::new(),
            dirs: Vec::new(),
        };
        out.ensure_dir(root)?;
        Ok(out)
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    fn subdir(&mut self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        self.ensure_dir(&d)?;
        Ok(d)
    }

    /// Register a file about to be written.
    fn file(&mut self, path: PathBuf) -> PathBuf {
        if !self.files.contains(&path) {
            self.files.push(path.clone());
        }
        path
    }

    fn cleanup(&self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
            let _ = std::fs::remove_file(f.with_extension("ckpt.tmp"));
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn manifest(command: &str, seed: Option<u64>, config: Option<&RunConfig>, inputs: serde_json::Value) -> serde_json::Value {
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": inputs,
    });
    if let Some(seed) = seed {
        m["seed"] = json!(seed);
    }
    if let Some(cfg) = config {
        let kv = cfg.to_kv();
        let map: BTreeMap<&str, &str> = kv.iter().collect();
        m["config"] = json!(map);
    }
    let deterministic = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v != "0");
    if !deterministic {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        m["timestamp_unix"] = json!(now);
    }
    m
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    let out_dir = match command {
        Command::Train(a) => &a.out,
        Command::Infer(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Ablate(a) => &a.out,
        Command::GenSynth(a) => &a.out,
    };
    let mut outputs = Outputs::new(out_dir)?;
    let result = match command {
        Command::Train(a) => cmd_train(a, &mut outputs),
        Command::Infer(a) => cmd_infer(a, &mut outputs),
        Command::Eval(a) => cmd_eval(a, &mut outputs),
        Command::Ablate(a) => cmd_ablate(a, &mut outputs),
        Command::GenSynth(a) => cmd_gen_synth(a, &mut outputs),
    };
    if result.is_err() {
        outputs.cleanup();
    }
    result
}

fn load_labelled(dir: &Path, size: usize) -> Result<Vec<RgbdSample>> {
    let ds = DatasetDir::open(dir)?;
    if ds.is_empty() {
        return Err(Error::Data(format!("{} holds no samples", dir.display())));
    }
    ds.load_all(size)
}

fn train_into(
    cfg: &RunConfig,
    samples: &[RgbdSample],
    outputs: &mut Outputs,
    dir: &Path,
    keep_best: bool,
) -> Result<(crate::model::Model, TrainOutcome)> {
    let mut model = build_variant(cfg.variant, cfg.train.seed)?;
    let last = outputs.file(dir.join("last.ckpt"));
    let best = outputs.file(dir.join("best.ckpt"));
    let outcome = trainer::train(&mut model, samples, &cfg.train, |m, e| {
        let meta = [("epoch", e.epoch.to_string()), ("mean_loss", e.mean_loss.to_string())];
        let ck = Checkpoint::from_model(m, &cfg.train, &meta);
        checkpoint::save(&last, &ck)?;
        if keep_best && e.is_best {
            checkpoint::save(&best, &ck)?;
        }
        Ok(())
    })?;
    write_loss_csv(&outputs.file(dir.join("loss.csv")), &outcome.records)?;
    Ok((model, outcome))
}

fn cmd_train(a: &TrainArgs, outputs: &mut Outputs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let samples = load_labelled(&a.data, cfg.variant.input_size)?;
    let out = a.out.clone();
    let (model, outcome) = train_into(&cfg, &samples, outputs, &out, true)?;
    let (report, rows) = trainer::evaluate_model(&model, &samples)?;
    write_json(&outputs.file(out.join("train_metrics.json")), &json!({ "report": report, "samples": rows }))?;
    let inputs = json!({ "data": display(&a.data), "samples": samples.len() });
    write_json(&outputs.file(out.join(MANIFEST_JSON)), &manifest("train", Some(cfg.train.seed), Some(&cfg), inputs))?;
    let best = outcome.best().map(|b| (b.epoch, b.mean_loss)).unwrap_or((0, f64::NAN));
    println!(
        "trained {} epochs on {} samples; best epoch {} (mean loss {:.4}); training S={:.4} maxF={:.4} maxE={:.4} MAE={:.4}",
        cfg.train.epochs,
        samples.len(),
        best.0,
        best.1,
        report.s_alpha,
        report.f_beta_max,
        report.e_phi_max,
        report.mae
    );
    Ok(())
}

fn cmd_infer(a: &InferArgs, outputs: &mut Outputs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    if !a.expect.is_empty() {
        ck.check_variant(&a.expect.resolve()?.variant)?;
    }
    let recorded = ck.config;
    let model = ck.into_model(None)?;
    let size = model.config().input_size;
    let ds = DatasetDir::open_inputs(&a.data)?;
    if ds.is_empty() {
        return Err(Error::Data(format!("{} holds no samples", a.data.display())));
    }
    let coarse_dirs = if a.emit_coarse {
        Some((outputs.subdir("coarse_rgb")?, outputs.subdir("coarse_d")?))
    } else {
        None
    };
    for p in ds.samples() {
        let mut sample = load_sample(&p.rgb, &p.depth, None, size)?;
        sample.id = p.id.clone();
        let pred = trainer::infer(&model, &sample)?;
        let target = if a.upsample { Some(image_dims(&p.rgb)?) } else { None };
        let fit = |m: &Map| match target {
            Some((h, w)) if m.dims() != (h, w) => m.resize_bilinear(h, w),
            _ => m.clone(),
        };
        save_map_png(&outputs.file(a.out.join(format!("{}.png", p.id))), &fit(&pred.s_f))?;
        if let Some((rgb_dir, d_dir)) = &coarse_dirs {
            for (dir, map) in [(rgb_dir, &pred.s_c_rgb), (d_dir, &pred.s_c_d)] {
                if let Some(m) = map {
                    save_map_png(&outputs.file(dir.join(format!("{}.png", p.id))), &fit(m))?;
                }
            }
        }
    }
    let inputs = json!({
        "checkpoint": display(&a.checkpoint),
        "data": display(&a.data),
        "samples": ds.len(),
        "emit_coarse": a.emit_coarse,
        "upsample": a.upsample,
    });
    write_json(&outputs.file(a.out.join(MANIFEST_JSON)), &manifest("infer", None, Some(&recorded), inputs))?;
    println!("wrote {} saliency maps to {}", ds.len(), a.out.display());
    Ok(())
}

/// Aggregate metrics as a one-row CSV table.
pub fn report_csv(name: &str, r: &MetricsReport) -> String {
    format!(
        "dataset,samples,s_alpha,f_beta_max,e_phi_max,mae\n{name},{},{},{},{},{}\n",
        r.samples, r.s_alpha, r.f_beta_max, r.e_phi_max, r.mae
    )
}

pub fn samples_csv(rows: &[SampleMetrics]) -> String {
    let mut s = String::from("id,s_alpha,f_beta_max,e_phi_max,mae\n");
    for r in rows {
        let f = r.f_beta_max.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.id, r.s_alpha, f, r.e_phi_max, r.mae);
    }
    s
}

pub fn curves_csv(r: &MetricsReport) -> String {
    let mut s = String::from("threshold,f_beta,e_phi\n");
    for t in 0..THRESHOLDS {
        let f = r.f_curve.get(t).map(|v| v.to_string()).unwrap_or_default();
        let e = r.e_curve.get(t).map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{t},{f},{e}");
    }
    s
}

fn cmd_eval(a: &EvalArgs, outputs: &mut Outputs) -> Result<()> {
    let name = match &a.name {
        Some(n) => n.clone(),
        None => a
            .gt
            .canonicalize()
            .ok()
            .and_then(|p| p.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "dataset".into()),
    };
    let (report, rows) = evaluate_dirs(&a.pred, &a.gt, a.normalize)?;
    write_json(
        &outputs.file(a.out.join(format!("{name}.json"))),
        &json!({ "dataset": name, "report": report, "samples": rows }),
    )?;
    write_text(&outputs.file(a.out.join(format!("{name}.csv"))), &report_csv(&name, &report))?;
    write_text(&outputs.file(a.out.join(format!("{name}_samples.csv"))), &samples_csv(&rows))?;
    write_text(&outputs.file(a.out.join(format!("{name}_curves.csv"))), &curves_csv(&report))?;
    let inputs = json!({ "pred": display(&a.pred), "gt": display(&a.gt), "normalize": a.normalize, "name": name });
    write_json(&outputs.file(a.out.join(MANIFEST_JSON)), &manifest("eval", None, None, inputs))?;
    println!(
        "{name}: {} samples  S={:.4}  maxF={:.4}  maxE={:.4}  MAE={:.4}",
        report.samples, report.s_alpha, report.f_beta_max, report.e_phi_max, report.mae
    );
    Ok(())
}

/// One row of the ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub dataset: String,
    pub s_alpha: f64,
    pub f_beta_max: f64,
    pub e_phi_max: f64,
    pub mae: f64,
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | dataset | S_alpha | max F | max E | MAE |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.variant, r.dataset, r.s_alpha, r.f_beta_max, r.e_phi_max, r.mae
        );
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,dataset,s_alpha,f_beta_max,e_phi_max,mae\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, r.dataset, r.s_alpha, r.f_beta_max, r.e_phi_max, r.mae);
    }
    s
}

fn cmd_ablate(a: &AblateArgs, outputs: &mut Outputs) -> Result<()> {
    let base = a.config.resolve()?;
    let variants = a
        .variants
        .split(',')
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    let size = base.variant.input_size;
    let train_set = load_labelled(&a.train, size)?;
    let mut eval_sets = vec![("train".to_string(), train_set.clone())];
    for dir in &a.eval {
        let name = DatasetDir::open(dir)?.name();
        eval_sets.push((name, load_labelled(dir, size)?));
    }
    let mut rows = Vec::new();
    for v in &variants {
        let cfg = RunConfig {
            variant: base.variant.with_variant(*v),
            train: base.train,
        };
        cfg.validate()?;
        log::info!("training variant {v}");
        let dir = outputs.subdir(&format!("variant_{v}"))?;
        let (model, _) = train_into(&cfg, &train_set, outputs, &dir, false)?;
        for (name, set) in &eval_sets {
            let (r, _) = trainer::evaluate_model(&model, set)?;
            rows.push(AblationRow {
                variant: format!("{v}'"),
                dataset: name.clone(),
                s_alpha: r.s_alpha,
                f_beta_max: r.f_beta_max,
                e_phi_max: r.e_phi_max,
                mae: r.mae,
            });
        }
    }
    write_text(&outputs.file(a.out.join("ablation.csv")), &ablation_csv(&rows))?;
    let table = ablation_markdown(&rows);
    write_text(&outputs.file(a.out.join("ablation.md")), &table)?;
    let inputs = json!({
        "train": display(&a.train),
        "eval": a.eval.iter().map(|p| display(p)).collect::<Vec<_>>(),
        "variants": variants.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
    });
    write_json(&outputs.file(a.out.join(MANIFEST_JSON)), &manifest("ablate", Some(base.train.seed), Some(&base), inputs))?;
    print!("{table}");
    Ok(())
}

fn cmd_gen_synth(a: &GenSynthArgs, outputs: &mut Outputs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    crate::dataset::check_target_size(a.size)?;
    let cfg = SynthConfig {
        size: a.size,
        ..SynthConfig::default()
    };
    let samples = synth::generate(a.count, &cfg, a.seed)?;
    for sub in ["rgb", "depth", "gt"] {
        outputs.subdir(sub)?;
        for s in &samples {
            outputs.file(a.out.join(sub).join(format!("{}.png", s.id)));
        }
    }
    outputs.file(a.out.join(crate::dataset::MANIFEST_FILE));
    synth::write_dataset(&a.out, &samples)?;
    let inputs = json!({ "count": a.count, "size": a.size });
    write_json(&outputs.file(a.out.join(MANIFEST_JSON)), &manifest("gen-synth", Some(a.seed), None, inputs))?;
    println!("wrote {} synthetic samples to {}", a.count, a.out.display());
    Ok(())
}
