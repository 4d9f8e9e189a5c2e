//! Batch commands behind the `spinn` binary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use spinn::config::{self, RunConfig};
use spinn::diagnostics::{self, BurgersReport, FieldPredictor, ModalVariant, ProbeKind};
use spinn::format::write_atomic;
use spinn::problems::{generate_reference, ProblemKind, ProblemSpec, ReferenceSolution, SolverConfig};
use spinn::training::{run_profile, train_windows_with, MetricRecord, ProfileRecord, ProfileTrainer, WindowedModel};
use spinn::{Checkpoint, Error, ImageModelKind, ImageTarget, Result, SavedModel};

pub const CHECKPOINT_FILE: &str = "checkpoint.spnckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SIDECAR_FILE: &str = "run.log";

#[derive(Debug, Parser)]
#[command(name = "spinn", version, about = "Fourier feature pyramid PINN experiments")]
pub struct Cli {
    /// Worker threads (accepted for compatibility; execution is single-threaded).
    #[arg(long, global = true, env = "SPINN_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config and write checkpoint, metrics and report.
    Train(TrainArgs),
    /// Relative L2 error of a checkpoint against a reference solution.
    Eval(EvalArgs),
    /// Generate a pseudospectral reference solution.
    MakeReference(MakeReferenceArgs),
    /// Pyramid size sweep at matched parameter counts.
    Sweep(SweepArgs),
    /// Spectral, modal or profile diagnostics of a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Fit an RGB image with a coordinate network.
    ImageFit(ImageFitArgs),
    /// Print a built-in run config.
    Preset { name: String },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config name instead of a file.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Checkpoint output path (defaults to the output directory).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Override the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeReferenceArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DiagnoseMode {
    Spectrum,
    Modal,
    Burgers,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: DiagnoseMode,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Modal grid size (defaults to twice the finest level).
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ImageModelArg {
    Beignet,
    Rff,
    Vanilla,
}

#[derive(Debug, Args)]
pub struct ImageFitArgs {
    #[arg(long, value_enum)]
    pub model: ImageModelArg,
    /// PPM image; defaults to the built-in 64x64 test pattern.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Process exit status for an error: 2 configuration or input, 3 numerical failure, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        _ if e.is_numerical() => 3,
        Error::UndefinedMetric(_) => 3,
        Error::Io { .. } | Error::Format(_) => 4,
        _ => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub problem: String,
    pub seed: u64,
    pub steps: usize,
    pub param_count: usize,
    pub final_loss: f64,
    /// Sum of the residual terms in the last logged record.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual_loss: Option<f64>,
    /// Per component; the second entry is the secondary field of two-field systems.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rel_l2: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub burgers: Option<BurgersReport>,
}

pub fn threads(requested: Option<usize>) -> Result<usize> {
    match requested {
        Some(0) => Err(Error::config("threads", "must be at least 1")),
        Some(n) => Ok(n),
        None => Ok(1),
    }
}

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::io(path, e)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn sidecar(dir: &Path, command: &str, threads: usize, started: Instant) -> Result<()> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let text = format!(
        "command={command}\nfinished_unix={now}\nwall_seconds={:.3}\nthreads_requested={threads}\nthreads_used=1\n",
        started.elapsed().as_secs_f64()
    );
    write_text(&dir.join(SIDECAR_FILE), &text)
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let conv = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(conv)?;
    for r in rows {
        w.write_record(r).map_err(conv)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    config::parse(&text)
}

/// Loads a reference and drops a duplicated periodic endpoint if present.
pub fn load_reference(path: &Path) -> Result<ReferenceSolution> {
    if !path.exists() {
        return Err(Error::io(
            path,
            io::Error::new(io::ErrorKind::NotFound, format!("reference file `{}` not found (create it with `spinn make-reference`)", path.display())),
        ));
    }
    let mut r = ReferenceSolution::load(path)?;
    r.drop_periodic_endpoints()?;
    Ok(r)
}

/// Everything a finished training run produced.
pub struct RunOutput {
    pub report: MetricReport,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<String>,
}

fn record_line(window: usize, r: &impl Serialize) -> String {
    let mut v = serde_json::to_value(r).expect("record serializes");
    if let Value::Object(m) = &mut v {
        m.insert("window".into(), json!(window));
    }
    serde_json::to_string(&v).expect("record serializes")
}

fn poisoned_dump(dir: &Path, err: &Error, window: usize, ckpt: &Checkpoint, lines: &[String]) {
    let tail: Vec<Value> = lines.iter().rev().take(20).rev().filter_map(|l| serde_json::from_str(l).ok()).collect();
    let _ = fs::create_dir_all(dir);
    let _ = write_json(&dir.join("poisoned.json"), &json!({ "error": err.to_string(), "window": window, "step": ckpt.step, "last_records": tail }));
    let _ = ckpt.save(&dir.join("poisoned.spnckpt"));
}

/// Runs training for a validated config. `dump_dir` receives a poisoned-run dump on numerical failure.
pub fn run_training(cfg: &RunConfig, reference: Option<&ReferenceSolution>, dump_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let mut metrics = Vec::new();
    if cfg.is_profile() {
        let mut tr = ProfileTrainer::new(cfg.profile_ansatz()?, cfg.profile_train_config()?)?;
        let log = match run_profile(&mut tr, &mut |r: &ProfileRecord| metrics.push(record_line(0, r))) {
            Ok(l) => l,
            Err(e) => {
                if let (Some(d), true) = (dump_dir, e.is_numerical()) {
                    poisoned_dump(d, &e, 0, &Checkpoint::from_profile(&tr, Some(cfg.clone())), &metrics);
                }
                return Err(e);
            }
        };
        let burgers = match log.last().and_then(|r| r.report) {
            Some(r) => r,
            None => diagnostics::burgers_report(&tr.ansatz)?,
        };
        let report = MetricReport {
            problem: cfg.problem.clone(),
            seed: cfg.seed,
            steps: tr.step,
            param_count: tr.ansatz.param_count(),
            final_loss: log.last().map(|r| r.loss).unwrap_or(f64::NAN),
            residual_loss: Some(burgers.pde_mse),
            rel_l2: None,
            burgers: Some(burgers),
        };
        return Ok(RunOutput { report, checkpoint: Checkpoint::from_profile(&tr, Some(cfg.clone())), metrics });
    }
    let problem = cfg.problem_spec()?;
    if let Some(r) = reference {
        check_reference(&problem, r)?;
    }
    let tc = cfg.train_config()?;
    let mc = cfg.model_config()?;
    let ic = problem.ic_data(&tc.ic_grid);
    let mut fail = None;
    let out = train_windows_with(
        &problem,
        &mc,
        &tc,
        problem.windows,
        ic,
        reference,
        &mut |w, r: &MetricRecord| metrics.push(record_line(w, r)),
        &mut |w, tr, _| fail = Some((w, Checkpoint::from_trainer(tr, Some(cfg.clone())))),
    );
    let out = match out {
        Ok(o) => o,
        Err(e) => {
            if let (Some(d), true, Some((w, ck))) = (dump_dir, e.is_numerical(), fail) {
                poisoned_dump(d, &e, w, &ck, &metrics);
            }
            return Err(e);
        }
    };
    let rel_l2 = reference.map(|r| diagnostics::relative_l2_against(&out.model, r)).transpose()?;
    let last = out.log.last();
    let residual_loss = last.map(|r| problem.residual_terms().map(|i| r.terms[i].loss).sum());
    let report = MetricReport {
        problem: cfg.problem.clone(),
        seed: cfg.seed,
        steps: tc.steps * problem.windows,
        param_count: out.model.models.iter().map(|m| m.param_count()).sum(),
        final_loss: last.map(|r| r.loss).unwrap_or(f64::NAN),
        residual_loss,
        rel_l2,
        burgers: None,
    };
    Ok(RunOutput { report, checkpoint: Checkpoint::from_outcome(&out, Some(cfg.clone())), metrics })
}

fn check_reference(problem: &ProblemSpec, r: &ReferenceSolution) -> Result<()> {
    if r.components() != problem.components() || r.axes.len() != problem.dims() {
        return Err(Error::Shape(format!(
            "reference `{}` has {} components on {} axes; {} needs {} on {}",
            r.problem,
            r.components(),
            r.axes.len(),
            problem.kind.name(),
            problem.components(),
            problem.dims()
        )));
    }
    Ok(())
}

fn resolve_reference(cfg: &RunConfig, flag: Option<&Path>, base: &Path) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| cfg.reference.as_ref().map(|r| base.join(r)))
}

pub fn cmd_train(args: &TrainArgs, threads: usize) -> Result<MetricReport> {
    let started = Instant::now();
    let (mut cfg, base) = match (&args.config, &args.preset) {
        (Some(p), _) => (load_config(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        (None, Some(name)) => (config::preset(name)?, PathBuf::new()),
        (None, None) => return Err(Error::config("config", "pass --config <file> or --preset <name>")),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.optim.max_steps = s;
    }
    cfg.validate()?;
    let out = args.out.clone().or_else(|| cfg.out_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs").join(&cfg.problem));
    let reference = match resolve_reference(&cfg, args.reference.as_deref(), &base) {
        Some(p) if !cfg.is_profile() => Some(load_reference(&p)?),
        _ => None,
    };
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let run = run_training(&cfg, reference.as_ref(), Some(&out))?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    run.checkpoint.save(&ckpt)?;
    let mut lines = run.metrics.join("\n");
    lines.push('\n');
    write_text(&out.join(METRICS_FILE), &lines)?;
    write_json(&out.join(REPORT_FILE), &run.report)?;
    sidecar(&out, "train", threads, started)?;
    Ok(run.report)
}

/// Relative L2 of a field checkpoint against a reference.
pub fn evaluate(ckpt: &Checkpoint, reference: &ReferenceSolution) -> Result<MetricReport> {
    let SavedModel::Field(model) = &ckpt.model else {
        return Err(Error::Unsupported("eval needs a time-dependent field checkpoint".into()));
    };
    if model.components() != reference.components() || model.models[0].dims() != reference.axes.len() {
        return Err(Error::Shape(format!(
            "model has {} outputs on {} axes, reference has {} components on {} axes",
            model.components(),
            model.models[0].dims(),
            reference.components(),
            reference.axes.len()
        )));
    }
    Ok(MetricReport {
        problem: reference.problem.clone(),
        seed: ckpt.run.as_ref().map(|r| r.seed).unwrap_or(0),
        steps: ckpt.step,
        param_count: model.models.iter().map(|m| m.param_count()).sum(),
        final_loss: f64::NAN,
        residual_loss: None,
        rel_l2: Some(diagnostics::relative_l2_against(model, reference)?),
        burgers: None,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let reference = load_reference(&args.reference)?;
    let report = evaluate(&ckpt, &reference)?;
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(report)
}

pub fn cmd_make_reference(args: &MakeReferenceArgs) -> Result<ReferenceSolution> {
    let kind = ProblemKind::parse(&args.problem)?;
    let mut sc = SolverConfig::for_problem(kind);
    if let Some(m) = args.modes {
        sc.modes = m;
    }
    if let Some(dt) = args.dt {
        sc.dt = dt;
    }
    if let Some(s) = args.samples {
        sc.samples = s;
    }
    if kind.dims() == 2 && sc.modes > 128 {
        return Err(Error::Unsupported(format!("two-dimensional references are generated at up to 128 modes per axis, got {}", sc.modes)));
    }
    let r = generate_reference(&ProblemSpec::new(kind), &sc)?;
    if let Some(d) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    r.save(&args.out)?;
    Ok(r)
}

/// One entry of a sweep: levels and, optionally, features per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub num_scales: usize,
    #[serde(default)]
    pub num_features: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Built-in base config name, or `base` below.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub base: Option<RunConfig>,
    /// Parameter count matched by entries that omit `num_features`.
    #[serde(default)]
    pub target_params: Option<usize>,
    pub runs: Vec<SweepEntry>,
}

pub const SWEEP_HEADER: [&str; 6] = ["levels", "d_h", "param_count", "rel_l2", "residual_loss", "status"];

/// Features per level whose model is closest to `target`, if within 10%.
pub fn match_features(base: &RunConfig, levels: usize, target: usize) -> Result<Option<(usize, usize)>> {
    let mut best: Option<(usize, usize)> = None;
    for d_h in 1..=4096 {
        let mut c = base.clone();
        let p = c.pyramid.as_mut().ok_or_else(|| Error::config("pyramid", "sweeps need a pyramid"))?;
        p.num_scales = levels;
        p.num_features = d_h;
        let n = c.model_config()?.param_count();
        if best.map_or(true, |(_, b)| n.abs_diff(target) < b.abs_diff(target)) {
            best = Some((d_h, n));
        }
        if n > 2 * target {
            break;
        }
    }
    Ok(best.filter(|&(_, n)| (n.abs_diff(target) as f64) <= 0.1 * target as f64))
}

pub fn run_sweep(spec: &SweepSpec, seed: Option<u64>, reference: Option<&ReferenceSolution>) -> Result<Vec<Vec<String>>> {
    let mut base = match (&spec.base, &spec.preset) {
        (Some(b), _) => b.clone(),
        (None, Some(p)) => config::preset(p)?,
        (None, None) if spec.runs.is_empty() => return Ok(Vec::new()),
        (None, None) => return Err(Error::config("preset", "a sweep needs `preset` or `base`")),
    };
    if let Some(s) = seed {
        base.seed = s;
    }
    let mut rows = Vec::new();
    for (i, e) in spec.runs.iter().enumerate() {
        let d_h = match (e.num_features, spec.target_params) {
            (Some(d), _) => Some(d),
            (None, Some(t)) => match_features(&base, e.num_scales, t)?.map(|(d, _)| d),
            (None, None) => return Err(Error::config(format!("runs[{i}].num_features"), "needed when no target_params is set")),
        };
        let Some(d_h) = d_h else {
            rows.push(vec![e.num_scales.to_string(), String::new(), String::new(), String::new(), String::new(), "skipped: no d_h within 10% of target".into()]);
            continue;
        };
        let mut c = base.clone();
        let p = c.pyramid.as_mut().ok_or_else(|| Error::config("pyramid", "sweeps need a pyramid"))?;
        p.num_scales = e.num_scales;
        p.num_features = d_h;
        let run = run_training(&c, reference, None)?;
        let r = &run.report;
        let rel = r.rel_l2.as_ref().map(|v| format!("{:e}", v[0])).unwrap_or_default();
        let res = r.residual_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        rows.push(vec![e.num_scales.to_string(), d_h.to_string(), r.param_count.to_string(), rel, res, "ok".into()]);
    }
    Ok(rows)
}

pub fn cmd_sweep(args: &SweepArgs, threads: usize) -> Result<Vec<Vec<String>>> {
    let started = Instant::now();
    let text = fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let spec: SweepSpec = serde_json::from_str(&text).map_err(|e| Error::config("sweep", e.to_string()))?;
    let reference = args.reference.as_deref().map(load_reference).transpose()?;
    let rows = run_sweep(&spec, args.seed, reference.as_ref())?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    write_csv(&args.out.join("sweep.csv"), &SWEEP_HEADER, &rows)?;
    sidecar(&args.out, "sweep", threads, started)?;
    Ok(rows)
}

fn field_model(ckpt: &Checkpoint) -> Result<&WindowedModel> {
    match &ckpt.model {
        SavedModel::Field(m) => Ok(m),
        _ => Err(Error::Unsupported("this diagnostic needs a time-dependent field checkpoint".into())),
    }
}

/// Modal tangent energies `(k, output, operator)` for cosine probes at `t = 0`.
pub fn modal_rows(ckpt: &Checkpoint, grid: Option<usize>) -> Result<Vec<(usize, f64, f64)>> {
    let model = &field_model(ckpt)?.models[0];
    let m = grid.unwrap_or(2 * model.config.pyramid.finest());
    (1..=m / 2)
        .map(|k| {
            let o = diagnostics::modal_tangent(model, k, ProbeKind::Cos, ModalVariant::Output, m, 0.0)?;
            let p = diagnostics::modal_tangent(model, k, ProbeKind::Cos, ModalVariant::Operator, m, 0.0)?;
            Ok((k, o, p))
        })
        .collect()
}

pub fn cmd_diagnose(args: &DiagnoseArgs, threads: usize) -> Result<Value> {
    let started = Instant::now();
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let result = match args.mode {
        DiagnoseMode::Burgers => {
            let SavedModel::Profile(a) = &ckpt.model else {
                return Err(Error::Unsupported("burgers diagnostics need a profile checkpoint".into()));
            };
            let r = diagnostics::burgers_report(a)?;
            write_csv(&args.out.join("burgers.csv"), &["pde_mse", "log10_max_residual"], &[vec![format!("{:e}", r.pde_mse), format!("{}", r.log10_max_residual)]])?;
            serde_json::to_value(r)?
        }
        DiagnoseMode::Spectrum => {
            let path = args.reference.as_deref().ok_or_else(|| Error::config("reference", "spectrum mode needs --reference"))?;
            let reference = load_reference(path)?;
            let model = field_model(&ckpt)?;
            if reference.axes.len() != 1 || model.components() != reference.components() {
                return Err(Error::Unsupported("spectra are computed for one-dimensional fields matching the reference".into()));
            }
            let pred = diagnostics::predict_reference(model, &reference)?;
            let n = reference.points_per_slice();
            let (mut rows, mut binned) = (Vec::new(), Vec::new());
            for (c, (p, r)) in pred.iter().zip(&reference.fields).enumerate() {
                let s = diagnostics::error_spectrum(p, r, n)?;
                rows.extend(s.modes.iter().zip(&s.magnitude).map(|(k, m)| vec![c.to_string(), k.to_string(), format!("{m:e}")]));
                binned.extend(s.binned.iter().enumerate().map(|(j, m)| vec![c.to_string(), j.to_string(), format!("{m:e}")]));
            }
            write_csv(&args.out.join("spectrum.csv"), &["component", "k", "magnitude"], &rows)?;
            write_csv(&args.out.join("spectrum_binned.csv"), &["component", "bin", "rms"], &binned)?;
            json!({ "modes": rows.len(), "bins": binned.len() })
        }
        DiagnoseMode::Modal => {
            let rows = modal_rows(&ckpt, args.grid)?;
            let csv_rows: Vec<Vec<String>> = rows.iter().map(|(k, o, p)| vec![k.to_string(), format!("{o:e}"), format!("{p:e}")]).collect();
            write_csv(&args.out.join("modal.csv"), &["k", "output_energy", "operator_energy"], &csv_rows)?;
            json!({ "modes": rows.len() })
        }
    };
    sidecar(&args.out, "diagnose", threads, started)?;
    Ok(result)
}

pub fn cmd_image_fit(args: &ImageFitArgs, threads: usize) -> Result<Value> {
    let started = Instant::now();
    let image = match &args.image {
        Some(p) => ImageTarget::load(p)?,
        None => ImageTarget::test_pattern(64),
    };
    let kind = match args.model {
        ImageModelArg::Beignet => ImageModelKind::Beignet,
        ImageModelArg::Rff => ImageModelKind::Rff { sigma: args.sigma },
        ImageModelArg::Vanilla => ImageModelKind::Vanilla,
    };
    let (model, trace) = spinn::image_fit::fit_image(kind, &image, args.steps, args.lr, args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let rows: Vec<Vec<String>> = trace.iter().map(|p| vec![p.step.to_string(), format!("{:e}", p.loss), format!("{}", p.psnr)]).collect();
    write_csv(&args.out.join("psnr.csv"), &["step", "loss", "psnr"], &rows)?;
    let render = model.render(image.height, image.width)?;
    let clamped: Vec<f64> = render.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTarget::new(image.height, image.width, clamped)?.save(&args.out.join("fit.ppm"))?;
    let ckpt = Checkpoint { model: SavedModel::Image(model.clone()), adam: None, rng: None, step: args.steps, weights: vec![], run: None };
    ckpt.save(&args.checkpoint.clone().unwrap_or_else(|| args.out.join(CHECKPOINT_FILE)))?;
    let report = json!({
        "model": kind,
        "param_count": model.param_count(),
        "steps": args.steps,
        "final_psnr": trace.last().map(|p| p.psnr),
    });
    write_json(&args.out.join(REPORT_FILE), &report)?;
    sidecar(&args.out, "image-fit", threads, started)?;
    Ok(report)
}

/// Dispatches a parsed command line; returns the JSON printed on success.
pub fn run(cli: &Cli) -> Result<Value> {
    let threads = threads(cli.threads)?;
    match &cli.command {
        Command::Train(a) => Ok(serde_json::to_value(cmd_train(a, threads)?)?),
        Command::Eval(a) => Ok(serde_json::to_value(cmd_eval(a)?)?),
        Command::MakeReference(a) => {
            let r = cmd_make_reference(a)?;
            Ok(json!({ "problem": r.problem, "shape": r.shape(), "out": a.out }))
        }
        Command::Sweep(a) => Ok(json!({ "rows": cmd_sweep(a, threads)?.len() })),
        Command::Diagnose(a) => cmd_diagnose(a, threads),
        Command::ImageFit(a) => cmd_image_fit(a, threads),
        Command::Preset { name } => Ok(serde_json::to_value(config::preset(name)?)?),
    }
}
