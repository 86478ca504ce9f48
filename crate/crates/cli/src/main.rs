//! `iterseg` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
//! config or arguments).

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use iterseg::config::RunConfig;
use iterseg::evalx::{self, Arm, ModelKind, ModelSet};
use iterseg::evolve::{evolve, export_history, AutoStop};
use iterseg::grid::Seed;
use iterseg::morpho::IslandPolicy;
use iterseg::segnet::Model;
use iterseg::synthgen::{self, StructureKind};
use iterseg::{gridio, teach, SegError};

/// Error that maps to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Parser)]
#[command(name = "iterseg", version, about = "Iterative seeded segmentation with learned stopping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    GenData(GenData),
    /// Train one model variant on a dataset.
    Train(Train),
    /// Run iterative segmentation on one image from a seed.
    Segment(Segment),
    /// Evaluate experiment arms on a dataset's held-out fold.
    Eval(Eval),
    /// Start the HTTP session service.
    Serve(Serve),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string())),
            None => Ok(RunConfig::desk()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Tube,
    Chamber,
}

impl From<KindArg> for StructureKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Tube => StructureKind::Tube,
            KindArg::Chamber => StructureKind::Chamber,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; one sub-directory per structure kind.
    #[arg(long)]
    out: PathBuf,
    /// Only this structure kind (default: both).
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Overrides the config seed.
    #[arg(long)]
    seed_rng: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Iter,
    IterAbl,
    Dir,
    DirDist,
}

impl From<VariantArg> for ModelKind {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Iter => ModelKind::Iter,
            VariantArg::IterAbl => ModelKind::IterAbl,
            VariantArg::Dir => ModelKind::Dir,
            VariantArg::DirDist => ModelKind::DirDist,
        }
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, history and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "iter")]
    model: VariantArg,
    /// Overrides the config seed.
    #[arg(long)]
    seed_rng: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    None,
    Largest,
    ContainingSeed,
}

impl From<PolicyArg> for Option<IslandPolicy> {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::None => None,
            PolicyArg::Largest => Some(IslandPolicy::Largest),
            PolicyArg::ContainingSeed => Some(IslandPolicy::ContainingSeed),
        }
    }
}

#[derive(Args)]
struct Segment {
    #[command(flatten)]
    config: ConfigArgs,
    /// Iterative-model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Image as a grid file (`.isg`) or 8-bit binary PGM (`.pgm`).
    #[arg(long)]
    image: PathBuf,
    /// Seed position `x,y` (column, row); `x,y,z` for volumes.
    #[arg(long)]
    seed: String,
    #[arg(long)]
    radius: Option<u32>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    stop_threshold: Option<f64>,
    /// Run all steps, ignoring the stop head.
    #[arg(long, conflicts_with = "freeze")]
    no_autostop: bool,
    /// Keep stepping after a stop, repeating the stop map.
    #[arg(long)]
    freeze: bool,
    #[arg(long, value_enum)]
    postprocess: Option<PolicyArg>,
    /// Directory for per-step maps and the stop-probability series.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Arms to run, e.g. ITER_MAX (repeatable; default: every arm with a checkpoint).
    #[arg(long = "arm")]
    arms: Vec<String>,
    #[arg(long)]
    iter: Option<PathBuf>,
    #[arg(long)]
    iter_abl: Option<PathBuf>,
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long)]
    dir_dist: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    /// Directory for `metrics.csv` and `summary.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Serve {
    #[command(flatten)]
    config: ConfigArgs,
    /// Iterative-model checkpoint, as `PATH` or `NAME=PATH` (repeatable; the first is the default).
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// Dataset directory whose images are offered, as `DIR` or `PREFIX=DIR` (repeatable).
    #[arg(long = "data")]
    data: Vec<String>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory served at `/` (browser client bundle).
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Directory receiving per-session history snapshots.
    #[arg(long)]
    persist: Option<PathBuf>,
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_data(dir: &Path) -> Result<synthgen::Dataset> {
    synthgen::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed_rng {
        cfg.seed = s;
    }
    let kinds = match a.kind {
        Some(k) => vec![k.into()],
        None => StructureKind::ALL.to_vec(),
    };
    for kind in kinds {
        let ds = synthgen::make_dataset(cfg.seed, kind, cfg.data.cases, cfg.data.test_size, &cfg.data.synth)?;
        let dir = a.out.join(kind.to_string());
        synthgen::save_dataset(&dir, &ds)?;
        println!("{kind}: {} cases, {} folds -> {}", ds.cases.len(), ds.folds.len(), dir.display());
    }
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed_rng {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(f) = a.fold {
        cfg.data.fold = f;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = load_data(&a.data)?;
    let (train_cases, test_cases) = ds.split(cfg.data.fold).map_err(|e| usage(e.to_string()))?;
    let kind: ModelKind = a.model.into();
    let tcfg = cfg.train_for(kind);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    eprintln!(
        "training {} on {} {} cases ({} held out), {} epochs",
        kind.name(),
        train_cases.len(),
        ds.kind,
        test_cases.len(),
        tcfg.epochs
    );
    let ckpt_dir = (tcfg.checkpoint_every > 0).then(|| a.out.join("checkpoints"));
    let outcome = teach::train(&train_cases, &test_cases, &tcfg, cfg.seed, ckpt_dir.as_deref(), |r| {
        if let Some(v) = r.val_dice {
            eprintln!("epoch {:4}  loss {:.4}  held-out one-step dice {v:.3}", r.epoch + 1, r.loss);
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ SegError::Diverged { .. }) => return Err(anyhow!(e)),
        Err(e) => return Err(e.into()),
    };
    let ckpt = a.out.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    teach::save_history(&a.out.join("history.csv"), &outcome.history)?;
    println!("{} ({} steps)", ckpt.display(), outcome.steps);
    Ok(())
}

/// Parses `x,y[,z]` into grid order (row-major, last axis = x).
fn parse_seed(text: &str, dims: &[usize], radius: u32) -> Result<Seed> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != dims.len() {
        return Err(usage(format!("--seed needs {} comma-separated coordinates, got {text:?}", dims.len())));
    }
    let names = ["x", "y", "z"];
    let mut coord = Vec::with_capacity(parts.len());
    for (k, p) in parts.iter().enumerate() {
        let v: usize = p.parse().map_err(|_| usage(format!("--seed coordinate {} is not a non-negative integer: {p:?}", names[k])))?;
        let axis = dims.len() - 1 - k;
        if v >= dims[axis] {
            return Err(usage(format!(
                "--seed {}={v} is out of bounds: must be < {} (image dims {:?})",
                names[k], dims[axis], dims
            )));
        }
        coord.push(v);
    }
    coord.reverse();
    Ok(Seed::new(coord, radius))
}

fn segment(a: Segment) -> Result<()> {
    let cfg = a.config.load()?;
    let model = load_model(&a.model)?;
    let image = gridio::load_image_any(&a.image).with_context(|| format!("loading image {}", a.image.display()))?;
    let mut opts = cfg.eval.evolve.clone();
    opts.autostop = if a.no_autostop {
        AutoStop::Off
    } else if a.freeze {
        AutoStop::Freeze
    } else {
        AutoStop::Halt
    };
    if let Some(m) = a.max_steps {
        opts.max_steps = m;
    }
    if let Some(t) = a.stop_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(usage(format!("--stop-threshold {t} must lie in [0, 1]")));
        }
        opts.stop_threshold = t;
    }
    opts.postprocess = match a.postprocess {
        Some(p) => p.into(),
        None => cfg.eval.iter_postprocess,
    };
    let seed = parse_seed(&a.seed, image.dims().as_slice(), a.radius.unwrap_or(cfg.eval.seed_radius))?;
    model.config.check_dims(image.dims()).map_err(|e| usage(e.to_string()))?;
    let state = evolve(&model, &image, &seed, &opts)?;
    println!("{:>4} {:>10} {:>5} {:>10}", "step", "stop_prob", "stop", "foreground");
    for (t, r) in state.history().iter().enumerate() {
        let p = r.stop_prob.map_or("-".to_string(), |p| format!("{p:.4}"));
        println!("{t:>4} {p:>10} {:>5} {:>10}", u8::from(r.stop), r.map.fg_count());
    }
    match state.first_stop() {
        Some(t) => println!("stopped at step {t}"),
        None => println!("no stop within {} steps", opts.max_steps),
    }
    if let Some(dir) = &a.out {
        export_history(dir, &state)?;
        let out = state.output()?;
        gridio::save_labels(&dir.join("result.isg"), &out)?;
        gridio::export_labels_pgm(&dir.join("result.pgm"), &out)?;
        println!("history written to {}", dir.display());
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(f) = a.fold {
        cfg.data.fold = f;
    }
    let load = |p: &Option<PathBuf>| p.as_deref().map(load_model).transpose();
    let (iter, iter_abl, dir, dir_dist) = (load(&a.iter)?, load(&a.iter_abl)?, load(&a.dir)?, load(&a.dir_dist)?);
    let set = ModelSet {
        iter: iter.as_ref(),
        iter_abl: iter_abl.as_ref(),
        dir: dir.as_ref(),
        dir_dist: dir_dist.as_ref(),
    };
    let arms: Vec<Arm> = if a.arms.is_empty() {
        Arm::ALL.into_iter().filter(|arm| set.get(arm.model_kind()).is_ok()).collect()
    } else {
        a.arms
            .iter()
            .map(|s| {
                Arm::parse(s).ok_or_else(|| {
                    let names: Vec<&str> = Arm::ALL.iter().map(|a| a.name()).collect();
                    usage(format!("unknown arm {s:?}; expected one of {}", names.join(", ")))
                })
            })
            .collect::<Result<_>>()?
    };
    if arms.is_empty() {
        return Err(usage("no checkpoints given (--iter, --iter-abl, --dir, --dir-dist)"));
    }
    for arm in &arms {
        set.get(arm.model_kind()).map_err(|e| usage(format!("{}: {e}", arm.name())))?;
    }
    let ds = load_data(&a.data)?;
    let (_, test_cases) = ds.split(cfg.data.fold).map_err(|e| usage(e.to_string()))?;
    let mut rows = Vec::new();
    for arm in arms {
        rows.extend(evalx::run_experiment(arm, &set, &test_cases, &cfg.eval)?);
    }
    println!("{:>4} {:<8} {:<9} {:<13} {:>7} {:>7} {:>7}", "case", "struct", "severity", "arm", "dice", "offset", "leak");
    for r in &rows {
        let off = r.stop_offset.map_or("-".to_string(), |o| if r.stopped == Some(false) { format!("{o}*") } else { o.to_string() });
        println!(
            "{:>4} {:<8} {:<9} {:<13} {:>7.4} {:>7} {:>7.3}",
            r.case_id,
            r.structure.to_string(),
            r.severity.to_string(),
            r.arm.name(),
            r.dice,
            off,
            r.leak
        );
    }
    let summary = evalx::format_summary(&evalx::summarize(&rows));
    println!();
    print!("{summary}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("metrics.csv"))?;
        evalx::write_metrics_csv(std::io::BufWriter::new(f), &rows)?;
        std::fs::write(dir.join("summary.txt"), &summary)?;
    }
    Ok(())
}

fn split_named(arg: &str, default_name: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
        _ => (default_name.to_string(), PathBuf::from(arg)),
    }
}

fn serve(a: Serve) -> Result<()> {
    let cfg = a.config.load()?;
    let mut models = BTreeMap::new();
    let mut default_model = None;
    for (k, m) in a.models.iter().enumerate() {
        let fallback = if k == 0 { "default".to_string() } else { format!("model{k}") };
        let (name, path) = split_named(m, &fallback);
        if models.insert(name.clone(), load_model(&path)?).is_some() {
            return Err(usage(format!("model name {name:?} given twice")));
        }
        default_model.get_or_insert(name);
    }
    let mut opts = cfg.eval.evolve.clone();
    opts.autostop = AutoStop::Halt;
    opts.postprocess = cfg.eval.iter_postprocess;
    let app = iterseg_serve::AppState::new(iterseg_serve::ServerConfig {
        models,
        default_model: default_model.expect("clap requires one model"),
        options: opts,
        persist_dir: a.persist.clone(),
        static_dir: a.static_dir.clone(),
    })
    .map_err(|e| usage(e.to_string()))?;
    for d in &a.data {
        let fallback = Path::new(d).file_name().map_or("data".into(), |n| n.to_string_lossy().into_owned());
        let (prefix, dir) = split_named(d, &fallback);
        let n = app.add_dataset(&dir, &prefix).with_context(|| format!("registering dataset {}", dir.display()))?;
        eprintln!("{n} images from {} as {prefix}/case_XXX", dir.display());
    }
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("listening on http://{}", a.bind);
    rt.block_on(iterseg_serve::serve(app, a.bind)).context("server failed")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
