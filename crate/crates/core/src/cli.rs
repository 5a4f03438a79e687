//! Command-line entry point.
//!
//! Every subcommand reads an optional JSON config, applies flag overrides on
//! top, writes its artifacts into `--out`, and prints a one-line summary.
//! The seed precedence is `--seed`, then `IOU_BALANCED_SEED`, then the config
//! file, then the built-in default.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    finite_diff_check, gradient_norm_curve, write_curves_csv, CurveSpec, GradCheckReport, LossKind,
    LOC_WEIGHT_PRESETS,
};
use crate::error::{Error, Result};
use crate::evaluation::{coco_ap_images, positive_score_iou_correlation, score_iou_stats, ApTable, EvalImage, ScoreIouStats};
use crate::geometry::{BoundAxis, BoxDelta};
use crate::losses::{
    cls_grad, cls_loss, cls_weights, loc_grad, loc_loss, loc_weights, standard_cls_loss, standard_loc_loss,
    Label, LocWeightMode, LossConfig, NegativeExample, PositiveExample, WeightDiagnostics, DEFAULT_DELTA,
};
use crate::simulator::experiment::{compare, run_experiment};
use crate::simulator::TrainConfig;

pub const SEED_ENV: &str = "IOU_BALANCED_SEED";

const EXIT_OK: i32 = 0;
const EXIT_CHECK_FAILED: i32 = 1;
const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "iou-balanced", version, about = "IoU-balanced detection losses: analysis, experiments, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Gradient-norm curves of the IoU-weighted smooth L1 loss.
    Gradcurve(GradcurveArgs),
    /// Finite-difference check of the analytic loss gradients.
    Gradcheck(GradcheckArgs),
    /// Weights, losses and gradients on a small hand-made batch.
    DemoLosses(DemoArgs),
    /// Train and evaluate one detector on the synthetic task.
    Train(TrainArgs),
    /// Paired baseline vs IoU-balanced runs over several seeds.
    Compare(CompareArgs),
    /// COCO-style AP and score-IoU statistics for stored detections.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// JSON config file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Center,
    Size,
}

impl From<AxisArg> for BoundAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Center => BoundAxis::Center,
            AxisArg::Size => BoundAxis::Size,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Manual,
    Normalized,
}

impl From<ModeArg> for LocWeightMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Manual => LocWeightMode::Manual,
            ModeArg::Normalized => LocWeightMode::Normalized,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
enum KindArg {
    Cls,
    Loc,
    #[default]
    Both,
}

#[derive(Debug, Args)]
struct GradcurveArgs {
    #[command(flatten)]
    common: Common,
    /// Without it, the baseline and every preset curve are emitted.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    w_loc: Option<f64>,
    #[arg(long, value_enum)]
    axis: Option<AxisArg>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    d_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    d_max: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcurveConfig {
    lambda: Option<f64>,
    w_loc: Option<f64>,
    axis: Option<BoundAxis>,
    delta: Option<f64>,
    d_min: Option<f64>,
    d_max: Option<f64>,
    n_points: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckConfig {
    trials: usize,
    seed: u64,
    kind: KindArg,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { trials: 100, seed: 0, kind: KindArg::Both }
    }
}

#[derive(Debug, Serialize)]
struct GradcheckOutput {
    passed: bool,
    reports: Vec<GradCheckReport>,
}

#[derive(Debug, Args)]
struct LossFlags {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// A fixed localization scale; disables calibration.
    #[arg(long)]
    w_loc: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

impl LossFlags {
    fn apply(&self, loss: &mut LossConfig) {
        if let Some(v) = self.eta {
            loss.eta = v;
        }
        if let Some(v) = self.lambda {
            loss.lambda_ = v;
        }
        if let Some(v) = self.w_loc {
            loss.w_loc = v;
        }
        if let Some(v) = self.delta {
            loss.delta = v;
        }
        if let Some(m) = self.mode {
            loss.loc_weight_mode = m.into();
        }
    }

    fn any_weighting(&self) -> bool {
        self.eta.is_some() || self.lambda.is_some() || self.w_loc.is_some() || self.mode.is_some()
    }
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss: LossFlags,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DemoConfig {
    loss: LossConfig,
    positives: Vec<PositiveExample>,
    negatives: Vec<NegativeExample>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        // cross entropies 1 and 2, one large and one small residual
        let positive = |ce: f64, iou: f64, dx: f64| PositiveExample {
            score: (-ce).exp(),
            label: Label::Positive,
            pred_delta: BoxDelta::new(dx, 0.0, 0.0, 0.0),
            target_delta: BoxDelta::ZERO,
            iou,
        };
        Self {
            loss: LossConfig {
                eta: 1.5,
                lambda_: 1.0,
                w_loc: 2.226,
                ..LossConfig::default()
            },
            positives: vec![positive(1.0, 0.9, 0.05), positive(2.0, 0.5, 0.5)],
            negatives: vec![NegativeExample { score: 0.1 }],
        }
    }
}

#[derive(Debug, Serialize)]
struct DemoOutput {
    loss: LossConfig,
    cls_weights: Vec<f64>,
    cls_diagnostics: WeightDiagnostics,
    loc_weights: Vec<f64>,
    loc_diagnostics: WeightDiagnostics,
    cls_loss: f64,
    standard_cls_loss: f64,
    loc_loss: f64,
    standard_loc_loss: f64,
    /// d(loss)/d(score) per positive, then per negative.
    cls_grad: Vec<f64>,
    loc_grad: Vec<BoxDelta>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    heldout: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.scenes {
            cfg.scenes_count = v;
        }
        if let Some(v) = self.heldout {
            cfg.heldout_count = v;
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss: LossFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Train with plain cross entropy and smooth L1.
    #[arg(long, conflicts_with_all = ["eta", "lambda", "w_loc", "mode"])]
    baseline: bool,
    /// Keep the configured `w_loc` instead of calibrating it on the first batch.
    #[arg(long)]
    no_calibrate: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss: LossFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Number of consecutive seeds starting at the base seed.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    no_calibrate: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// JSON object with an `images` array; a training report works as is.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Deserialize)]
struct EvalInput {
    images: Vec<EvalImage>,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    ap_table: ApTable,
    score_iou: ScoreIouStats,
    spearman: Option<f64>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Generation(_) | Error::Calibration(_) => EXIT_CHECK_FAILED,
                _ => EXIT_USAGE,
            }
        }
    }
}

/// `Ok(false)` means the command ran but a check failed.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Gradcurve(a) => gradcurve(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DemoLosses(a) => demo_losses(a),
        Command::Train(a) => train(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(config))
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn gradcurve(a: GradcurveArgs) -> Result<bool> {
    let cfg: GradcurveConfig = load_config(a.common.config.as_deref())?;
    let axis = a.axis.map(BoundAxis::from).or(cfg.axis).unwrap_or(BoundAxis::Center);
    let lambda = a.lambda.or(cfg.lambda);
    let w_loc = a.w_loc.or(cfg.w_loc);
    let pairs: Vec<(f64, f64)> = match lambda {
        Some(l) => vec![(l, w_loc.unwrap_or(1.0))],
        None if w_loc.is_some() => {
            return Err(Error::Config("--w-loc needs --lambda".into()));
        }
        None => std::iter::once((0.0, 1.0)).chain(LOC_WEIGHT_PRESETS).collect(),
    };
    let mut curves = Vec::with_capacity(pairs.len());
    for (l, w) in pairs {
        let mut spec = CurveSpec::new(l, w, axis);
        spec.delta = a.delta.or(cfg.delta).unwrap_or(DEFAULT_DELTA);
        spec.d_min = a.d_min.or(cfg.d_min).unwrap_or(spec.d_min);
        spec.d_max = a.d_max.or(cfg.d_max).unwrap_or(spec.d_max);
        spec.n_points = a.n_points.or(cfg.n_points).unwrap_or(spec.n_points);
        let points = gradient_norm_curve(&spec)?;
        curves.push((spec, points));
    }
    let mut w = create(&a.common.out, "gradcurve.csv")?;
    write_curves_csv(&mut w, &curves)?;
    w.flush()?;
    println!(
        "gradcurve: {} curve(s) x {} points on the {} axis -> {}",
        curves.len(),
        curves[0].1.len(),
        axis.as_str(),
        a.common.out.join("gradcurve.csv").display()
    );
    Ok(true)
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let cfg: GradcheckConfig = load_config(a.common.config.as_deref())?;
    let trials = a.trials.unwrap_or(cfg.trials);
    if trials == 0 {
        return Err(Error::Config("--trials must be positive".into()));
    }
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let kinds: &[LossKind] = match a.kind.unwrap_or(cfg.kind) {
        KindArg::Cls => &[LossKind::Cls],
        KindArg::Loc => &[LossKind::Loc],
        KindArg::Both => &[LossKind::Cls, LossKind::Loc],
    };
    let reports = kinds
        .iter()
        .map(|&k| finite_diff_check(k, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    let passed = reports.iter().all(|r| r.passed);
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    write_json(&a.common.out, "gradcheck.json", &GradcheckOutput { passed, reports })?;
    println!(
        "gradcheck: {} (max relative error {worst:.3e}, tolerance {:.0e}, seed {seed})",
        if passed { "pass" } else { "FAIL" },
        crate::analysis::FD_TOLERANCE
    );
    Ok(passed)
}

fn demo_losses(a: DemoArgs) -> Result<bool> {
    let mut cfg: DemoConfig = load_config(a.common.config.as_deref())?;
    a.loss.apply(&mut cfg.loss);
    cfg.loss.validate()?;
    if cfg.positives.is_empty() {
        return Err(Error::Config("demo batch needs at least one positive".into()));
    }
    let cw = cls_weights(&cfg.positives, cfg.loss.eta)?;
    let lw = loc_weights(&cfg.positives, &cfg.loss)?;
    let mut grads = Vec::with_capacity(cfg.positives.len() + cfg.negatives.len());
    for (p, w) in cfg.positives.iter().zip(&cw.values) {
        grads.push(cls_grad(p.score, Label::Positive, *w)?);
    }
    for n in &cfg.negatives {
        grads.push(cls_grad(n.score, Label::Negative, 1.0)?);
    }
    let out = DemoOutput {
        loss: cfg.loss,
        cls_loss: cls_loss(&cfg.positives, &cfg.negatives, &cfg.loss)?,
        standard_cls_loss: standard_cls_loss(&cfg.positives, &cfg.negatives)?,
        loc_loss: loc_loss(&cfg.positives, &cfg.loss)?,
        standard_loc_loss: standard_loc_loss(&cfg.positives, cfg.loss.delta),
        cls_weights: cw.values,
        cls_diagnostics: cw.diagnostics,
        loc_weights: lw.values,
        loc_diagnostics: lw.diagnostics,
        cls_grad: grads,
        loc_grad: loc_grad(&cfg.positives, &cfg.loss)?,
    };
    write_json(&a.common.out, "demo_losses.json", &out)?;
    println!(
        "demo-losses: cls {:.6} (standard {:.6}), loc {:.6} (standard {:.6})",
        out.cls_loss, out.standard_cls_loss, out.loc_loss, out.standard_loc_loss
    );
    Ok(true)
}

fn train(a: TrainArgs) -> Result<bool> {
    let mut cfg: TrainConfig = load_config(a.common.config.as_deref())?;
    a.loss.apply(&mut cfg.loss);
    a.train.apply(&mut cfg);
    cfg.seed = resolve_seed(a.train.seed, cfg.seed)?;
    if a.baseline {
        cfg.baseline = true;
    } else if a.loss.any_weighting() {
        cfg.baseline = false;
    }
    if a.no_calibrate || a.loss.w_loc.is_some() {
        cfg.calibrate_w_loc = false;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg)?;
    let out = &a.common.out;
    write_json(out, "experiment_report.json", &report)?;
    let mut w = create(out, "ap_table.csv")?;
    report.ap_table.write_csv(&mut w)?;
    let mut w = create(out, "score_iou_bins.csv")?;
    report.score_iou.write_bins_csv(&mut w)?;
    let mut w = create(out, "iou_exceedance.csv")?;
    report.score_iou.write_exceedance_csv(&mut w)?;
    let mut w = create(out, "epoch_losses.csv")?;
    report.write_epochs_csv(&mut w)?;
    println!(
        "train: {} seed {} AP {:.4} AP50 {:.4} AP75 {:.4} AP90 {:.4} spearman {}",
        if cfg.baseline { "baseline" } else { "balanced" },
        cfg.seed,
        report.ap_table.mean,
        report.ap_table.ap50,
        report.ap_table.ap75,
        report.ap_table.ap90,
        fmt_opt(report.spearman)
    );
    Ok(true)
}

fn compare_cmd(a: CompareArgs) -> Result<bool> {
    let mut base: TrainConfig = load_config(a.common.config.as_deref())?;
    a.train.apply(&mut base);
    base.seed = resolve_seed(a.train.seed, base.seed)?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let mut treatment = base.clone();
    a.loss.apply(&mut treatment.loss);
    treatment.baseline = false;
    if a.no_calibrate || a.loss.w_loc.is_some() {
        treatment.calibrate_w_loc = false;
    }
    let baseline = TrainConfig { baseline: true, ..base.clone() };
    baseline.validate()?;
    treatment.validate()?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| base.seed.wrapping_add(i)).collect();
    let report = compare(&baseline, &treatment, &seeds)?;
    write_json(&a.common.out, "compare_report.json", &report)?;
    let mut w = create(&a.common.out, "compare.csv")?;
    report.write_csv(&mut w)?;
    let m = &report.mean_delta;
    println!(
        "compare: eta {} lambda {} over {} seeds, mean delta AP {:+.4} AP50 {:+.4} AP80 {:+.4} AP90 {:+.4} spearman {}",
        treatment.loss.eta,
        treatment.loss.lambda_,
        seeds.len(),
        m.ap,
        m.ap50,
        m.ap80,
        m.ap90,
        m.spearman.map(|v| format!("{v:+.4}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(true)
}

fn eval(a: EvalArgs) -> Result<bool> {
    let text = fs::read_to_string(&a.input)
        .map_err(|e| Error::Config(format!("cannot read input {}: {e}", a.input.display())))?;
    let input: EvalInput =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid input {}: {e}", a.input.display())))?;
    let out = EvalOutput {
        ap_table: coco_ap_images(&input.images),
        score_iou: score_iou_stats(&input.images),
        spearman: positive_score_iou_correlation(&input.images, 0.5),
    };
    write_json(&a.out, "eval_report.json", &out)?;
    let mut w = create(&a.out, "ap_table.csv")?;
    out.ap_table.write_csv(&mut w)?;
    let mut w = create(&a.out, "score_iou_bins.csv")?;
    out.score_iou.write_bins_csv(&mut w)?;
    let mut w = create(&a.out, "iou_exceedance.csv")?;
    out.score_iou.write_exceedance_csv(&mut w)?;
    println!(
        "eval: {} images, AP {:.4} AP50 {:.4} AP75 {:.4} spearman {}",
        input.images.len(),
        out.ap_table.mean,
        out.ap_table.ap50,
        out.ap_table.ap75,
        fmt_opt(out.spearman)
    );
    Ok(true)
}
