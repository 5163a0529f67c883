//! The `randes` command line.
//!
//! Exit codes: 0 success, 2 structural mismatch, 3 I/O, 4 configuration,
//! 5 integrity (hash mismatch, corrupt or incompatible files). Human-readable
//! progress goes to stderr, machine-readable JSON to stdout.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{pairwise_cosine_stats, InterferenceReport};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::{self, ArchConfig, SweepConfig, SweepResult};
use crate::schema::{parse_schema, NamingConvention, SelectorMode, TargetSelector};
use crate::superposition::{ModelInput, ModelSource, StoreConfig, SuperpositionStore, MANIFEST_FILE};
use crate::transforms::{materialize, TransformMode, TransformSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_STRUCTURAL: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_INTEGRITY: i32 = 5;

/// Environment variable holding the log filter (`info`, `debug`, ...).
pub const LOG_ENV: &str = "RANDES_LOG";

const LOCK_FILE: &str = ".randes.lock";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::StructuralMismatch { .. }
        | Error::InvalidTensor(_)
        | Error::DegenerateInput(_)
        | Error::Schema(_)
        | Error::NumericalDegeneracy(_) => EXIT_STRUCTURAL,
        Error::Io(_) => EXIT_IO,
        Error::InvalidSpec(_)
        | Error::UnknownTask(_)
        | Error::DuplicateTask(_)
        | Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::Json(_) => EXIT_CONFIG,
        Error::Integrity(_) | Error::Format(_) | Error::Version(_) => EXIT_INTEGRITY,
    }
}

#[derive(Debug, Parser)]
#[command(name = "randes", version, about = "Store many fine-tuned models as one base plus a superposed delta")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a store from a base checkpoint and fine-tuned models.
    Compress(CompressArgs),
    /// Regenerate one model from a store.
    Retrieve(RetrieveArgs),
    /// Add models to an existing store.
    Add(SwapArgs),
    /// Remove models from a store; the original checkpoints must be supplied.
    Remove(SwapArgs),
    /// Interference norms and pairwise cosines of a set of models.
    Analyze(AnalyzeArgs),
    /// Run a synthetic-suite sweep described by a JSON config.
    Sweep(SweepArgs),
    /// Summarize a `sweep.json`.
    Report(ReportArgs),
    /// Write a synthetic base and fine-tuned checkpoints.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// identity, shuffle, shift, rsf, srsf or rd.
    #[arg(long, default_value = "srsf")]
    pub mode: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f32,
    /// all, mlp, attn or custom.
    #[arg(long, default_value = "all")]
    pub selector: String,
    /// Regex over layer types for `--selector custom`.
    #[arg(long = "pattern")]
    pub patterns: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub skip_rate: usize,
    /// Required for the non-orthogonal `rd` mode.
    #[arg(long)]
    pub allow_non_orthogonal: bool,
    /// JSON naming convention replacing the default layer-name rules.
    #[arg(long)]
    pub naming: Option<PathBuf>,
}

impl TransformArgs {
    fn store_config(&self) -> Result<StoreConfig> {
        let mode: TransformMode = self.mode.parse()?;
        if !mode.is_orthogonal() && !self.allow_non_orthogonal {
            return Err(Error::InvalidSpec(format!(
                "mode `{mode}` is not orthogonal; pass --allow-non-orthogonal to use it"
            )));
        }
        let selector_mode: SelectorMode = self.selector.parse()?;
        let selector = TargetSelector {
            mode: selector_mode,
            patterns: self.patterns.clone(),
            skip_rate: self.skip_rate,
        };
        let naming_convention = match &self.naming {
            Some(p) => serde_json::from_slice::<NamingConvention>(&fs::read(p)?)
                .map_err(|e| Error::Config(format!("naming convention `{}`: {e}", p.display())))?,
            None => NamingConvention::default(),
        };
        let config = StoreConfig {
            lambda: self.lambda,
            mode,
            global_seed: self.seed,
            selector,
            naming_convention,
            allow_non_orthogonal: self.allow_non_orthogonal,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// `id=path`, repeatable. Model indices follow the order given.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Store directory to create or overwrite.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub transform: TransformArgs,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SwapArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    /// `id=path`, repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// `id=path`, repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Take mode, seed, λ and model indices from this store instead of the flags.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Directory for `report.json` and `report.csv`; JSON goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub transform: TransformArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's λ grid, as `start:stop:step`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Directory for `sweep.json` and `sweep.csv`; JSON goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A `sweep.json` written by `randes sweep`.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub tasks: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
}

/// Installs the `RANDES_LOG`-controlled logger. Safe to call more than once.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name) and runs the command against the process streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// As [`run`], writing to the given streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Compress(a) => compress(a, out, err),
        Command::Retrieve(a) => retrieve(a, out, err),
        Command::Add(a) => add(a, out, err),
        Command::Remove(a) => remove(a, out, err),
        Command::Analyze(a) => analyze(a, out, err),
        Command::Sweep(a) => sweep(a, out, err),
        Command::Report(a) => report(a, out, err),
        Command::Synth(a) => synth(a, out, err),
    }
}

/// Advisory lock held for the lifetime of a mutating command.
struct StoreLock(Option<PathBuf>);

impl StoreLock {
    fn acquire(dir: &Path) -> Self {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                StoreLock(Some(path))
            }
            Err(e) => {
                log::warn!("could not take lock {}: {e}; continuing", path.display());
                StoreLock(None)
            }
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        if let Some(p) = &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn parse_model_args(specs: &[String]) -> Result<Vec<(String, PathBuf)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(specs.len());
    for s in specs {
        let (id, path) = s
            .split_once('=')
            .filter(|(id, path)| !id.is_empty() && !path.is_empty())
            .ok_or_else(|| Error::InvalidArgument(format!("--model `{s}` is not id=path")))?;
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateTask(id.to_string()));
        }
        out.push((id.to_string(), PathBuf::from(path)));
    }
    Ok(out)
}

fn require_file(path: &Path) -> Result<()> {
    fs::metadata(path).map(|_| ()).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn load_model(id: &str, path: &Path) -> Result<ModelInput> {
    let map = checkpoint::read(path)?;
    Ok(ModelInput {
        task_id: id.to_string(),
        source: ModelSource::from_checkpoint(map)?,
    })
}

fn emit_json(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn compress(a: CompressArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let models = parse_model_args(&a.models)?;
    let config = a.transform.store_config()?;
    require_file(&a.base)?;
    for (_, p) in &models {
        require_file(p)?;
    }
    fs::create_dir_all(&a.out)?;
    let _lock = StoreLock::acquire(&a.out);

    let base = checkpoint::read(&a.base)?;
    let base_bytes = fs::metadata(&a.base)?.len();
    let mut store = SuperpositionStore::empty(base, config)?;
    for (id, path) in &models {
        let entry = store.add_model(load_model(id, path)?)?;
        writeln!(err, "{:>16}  index {:>3}  ‖Δ‖ = {:.6}", entry.task_id, entry.model_index, entry.delta_norm)?;
    }
    let files = store.save(&a.out)?;
    writeln!(
        err,
        "wrote {} ({} bytes: multi-delta {}, manifest {}; base checkpoint {} bytes)",
        a.out.display(),
        files.total(),
        files.multi_delta_bytes,
        files.manifest_bytes,
        base_bytes
    )?;
    emit_json(
        out,
        &json!({
            "store": a.out,
            "tasks": store.registry().iter().map(|e| json!({
                "task_id": e.task_id,
                "model_index": e.model_index,
                "delta_norm": e.delta_norm,
            })).collect::<Vec<_>>(),
            "multi_delta_bytes": files.multi_delta_bytes,
            "manifest_bytes": files.manifest_bytes,
            "total_bytes": files.total(),
        }),
    )
}

fn retrieve(a: RetrieveArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    require_file(&a.base)?;
    require_file(&a.store.join(MANIFEST_FILE))?;
    if same_file(&a.out, &a.base) {
        return Err(Error::InvalidArgument("--out must not overwrite the base checkpoint".into()));
    }
    let store = SuperpositionStore::load_with_base_file(&a.store, &a.base)?;
    let start = Instant::now();
    let model = store.retrieve(&a.task)?;
    let elapsed = start.elapsed();
    let bytes = checkpoint::write(&a.out, &model)?;
    writeln!(
        err,
        "retrieved `{}` in {:.2} ms -> {} ({bytes} bytes)",
        a.task,
        elapsed.as_secs_f64() * 1e3,
        a.out.display()
    )?;
    emit_json(
        out,
        &json!({
            "task_id": a.task,
            "out": a.out,
            "bytes": bytes,
            "retrieval_ms": elapsed.as_secs_f64() * 1e3,
        }),
    )
}

fn add(a: SwapArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let models = parse_model_args(&a.models)?;
    require_file(&a.base)?;
    for (_, p) in &models {
        require_file(p)?;
    }
    let _lock = StoreLock::acquire(&a.store);
    let mut store = SuperpositionStore::load_with_base_file(&a.store, &a.base)?;
    for (id, path) in &models {
        let e = store.add_model(load_model(id, path)?)?;
        writeln!(err, "added `{}` as index {}", e.task_id, e.model_index)?;
    }
    let files = store.save(&a.store)?;
    emit_json(
        out,
        &json!({
            "tasks": store.task_ids().collect::<Vec<_>>(),
            "multi_delta_bytes": files.multi_delta_bytes,
            "manifest_bytes": files.manifest_bytes,
        }),
    )
}

fn remove(a: SwapArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let models = parse_model_args(&a.models)?;
    require_file(&a.base)?;
    for (_, p) in &models {
        require_file(p)?;
    }
    let _lock = StoreLock::acquire(&a.store);
    let mut store = SuperpositionStore::load_with_base_file(&a.store, &a.base)?;
    for (id, path) in &models {
        let input = load_model(id, path)?;
        let e = store.remove_model(id, &input.source)?;
        writeln!(err, "removed `{}` (index {})", e.task_id, e.model_index)?;
    }
    let files = store.save(&a.store)?;
    emit_json(
        out,
        &json!({
            "tasks": store.task_ids().collect::<Vec<_>>(),
            "multi_delta_bytes": files.multi_delta_bytes,
            "manifest_bytes": files.manifest_bytes,
        }),
    )
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let models = parse_model_args(&a.models)?;
    require_file(&a.base)?;
    for (_, p) in &models {
        require_file(p)?;
    }
    let (base, config, indices) = match &a.store {
        Some(dir) => {
            let store = SuperpositionStore::load_with_base_file(dir, &a.base)?;
            let indices = models
                .iter()
                .map(|(id, _)| store.entry(id).map(|e| e.model_index))
                .collect::<Result<Vec<_>>>()?;
            let config = store.config().clone();
            (store.base().clone(), config, indices)
        }
        None => {
            let config = a.transform.store_config()?;
            (checkpoint::read(&a.base)?, config, (0..models.len() as u64).collect())
        }
    };
    let schema = parse_schema(&base, &config.naming_convention)?;
    let mut ids = Vec::with_capacity(models.len());
    let mut deltas = Vec::with_capacity(models.len());
    let mut transforms = Vec::with_capacity(models.len());
    for ((id, path), &index) in models.iter().zip(&indices) {
        ids.push(id.clone());
        deltas.push(load_model(id, path)?.source.delta(&base)?);
        let spec = TransformSpec::new(config.mode, config.global_seed, index, config.selector.clone());
        transforms.push(materialize(&spec, &schema)?);
    }
    let lambda = f64::from(config.lambda);
    let reports = InterferenceReport::compute_all(&ids, &deltas, &transforms, lambda)?;
    for r in &reports {
        writeln!(
            err,
            "{:>16}  interference {:.6} (expansion {:.6})  mean |cos| {:.6}",
            r.task_id, r.direct_norm, r.expansion_norm, r.mean_abs_cosine
        )?;
    }
    if deltas.len() >= 2 {
        let raw = pairwise_cosine_stats::<crate::transforms::MaterializedTransform>(&deltas, None)?;
        let tr = pairwise_cosine_stats(&deltas, Some(&transforms))?;
        writeln!(
            err,
            "mean |cos| of deltas: raw {:.6}, transformed ({}) {:.6}",
            raw.summary.mean_abs, config.mode, tr.summary.mean_abs
        )?;
    }
    let json = serde_json::to_value(&reports)?;
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut body = serde_json::to_vec_pretty(&json)?;
            body.push(b'\n');
            checkpoint::write_atomic(&dir.join("report.json"), &body)?;
            checkpoint::write_atomic(&dir.join("report.csv"), InterferenceReport::to_csv(&reports).as_bytes())?;
            writeln!(err, "wrote {}/report.json and report.csv", dir.display())?;
            Ok(())
        }
        None => emit_json(out, &json),
    }
}

fn sweep(a: SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let text = fs::read(&a.config)?;
    let mut config: SweepConfig = serde_json::from_slice(&text)
        .map_err(|e| Error::Config(format!("sweep config `{}`: {e}", a.config.display())))?;
    if let Some(g) = &a.grid {
        config.grid = Some(harness::parse_grid(g)?);
    }
    writeln!(
        err,
        "generating {} tasks (seed {}), sweeping {}",
        config.num_tasks,
        config.seed,
        config.axis.as_str()
    )?;
    let result = config.run()?;
    for p in &result.points {
        writeln!(
            err,
            "{:>10}  val {:+.6}  test {:+.6}  interference {:.4}  mean |cos| {:.5}",
            p.setting, p.avg_val_metric, p.avg_metric, p.interference_norm, p.mean_abs_cosine
        )?;
    }
    writeln!(err, "argbest {} = {}", result.axis.as_str(), result.argbest)?;
    let json = result.to_json()?;
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            checkpoint::write_atomic(&dir.join("sweep.json"), json.as_bytes())?;
            checkpoint::write_atomic(&dir.join("sweep.csv"), result.to_csv().as_bytes())?;
            writeln!(err, "wrote {}/sweep.json and sweep.csv", dir.display())?;
        }
        None => out.write_all(json.as_bytes())?,
    }
    Ok(())
}

fn report(a: ReportArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let result: SweepResult = serde_json::from_slice(&fs::read(&a.input)?)
        .map_err(|e| Error::Format(format!("`{}` is not a sweep result: {e}", a.input.display())))?;
    writeln!(
        err,
        "{:>10}  {:>12}  {:>12}  {:>12}  {:>10}  {:>6}",
        result.axis.as_str(),
        "val",
        "test",
        "interference",
        "mean|cos|",
        "layers"
    )?;
    for p in &result.points {
        let mark = if p.setting == result.argbest { " *" } else { "" };
        writeln!(
            err,
            "{:>10}  {:>12.6}  {:>12.6}  {:>12.4}  {:>10.5}  {:>6}{mark}",
            p.setting, p.avg_val_metric, p.avg_metric, p.interference_norm, p.mean_abs_cosine, p.selected_layers
        )?;
    }
    let best = result.best();
    emit_json(
        out,
        &json!({
            "axis": result.axis,
            "argbest": result.argbest,
            "best_val_metric": best.avg_val_metric,
            "best_test_metric": best.avg_metric,
            "points": result.points.len(),
        }),
    )
}

fn synth(a: SynthArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let arch = ArchConfig {
        width: a.width,
        blocks: a.blocks,
        ..ArchConfig::default()
    };
    writeln!(err, "training {} tasks (seed {})", a.tasks, a.seed)?;
    let ts = harness::generate_tasks(a.seed, a.tasks, &arch)?;
    fs::create_dir_all(&a.out)?;
    checkpoint::write(a.out.join("base.rdck"), &ts.base)?;
    let mut files = Vec::with_capacity(ts.len());
    for (task, model) in ts.tasks.iter().zip(&ts.finetuned) {
        let path = a.out.join(format!("{}.rdck", task.task_id));
        checkpoint::write(&path, model)?;
        files.push(json!({ "task_id": task.task_id, "path": path }));
    }
    writeln!(err, "wrote base.rdck and {} task checkpoints to {}", ts.len(), a.out.display())?;
    emit_json(out, &json!({ "base": a.out.join("base.rdck"), "tasks": files }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::mismatch("w", "x")), 2);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::DuplicateTask("a".into())), 4);
        assert_eq!(exit_code(&Error::UnknownTask("a".into())), 4);
        assert_eq!(exit_code(&Error::Integrity("x".into())), 5);
    }

    #[test]
    fn model_args() {
        let ok = parse_model_args(&["a=x.rdck".into(), "b=y=z.rdck".into()]).unwrap();
        assert_eq!(ok[1], ("b".to_string(), PathBuf::from("y=z.rdck")));
        assert!(matches!(
            parse_model_args(&["a=x".into(), "a=y".into()]),
            Err(Error::DuplicateTask(_))
        ));
        assert!(parse_model_args(&["noequals".into()]).is_err());
        assert!(parse_model_args(&["=x".into()]).is_err());
    }

    #[test]
    fn bad_flags_are_config_errors() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run_with(["randes", "compress", "--bogus"], &mut o, &mut e), EXIT_CONFIG);
        assert_eq!(run_with(["randes", "--help"], &mut o, &mut e), EXIT_OK);
    }

    #[test]
    fn rd_needs_opt_in() {
        let args = TransformArgs {
            mode: "rd".into(),
            seed: 1,
            lambda: 1.0,
            selector: "all".into(),
            patterns: vec![],
            skip_rate: 1,
            allow_non_orthogonal: false,
            naming: None,
        };
        assert!(matches!(args.store_config(), Err(Error::InvalidSpec(_))));
        let args = TransformArgs {
            allow_non_orthogonal: true,
            ..args
        };
        assert!(args.store_config().is_ok());
    }
}
