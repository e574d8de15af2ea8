//! `tvmerge`: checkpoint arithmetic from the command line.
//!
//! Exit codes: 0 on success, 1 for bad input (usage, missing or malformed
//! files, incompatible operands), 2 for internal failures.

mod search;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use tvmerge_core::harness::{run_demo, DemoConfig, Scenario};
use tvmerge_core::merge_engine::{synthesize_st, task_analogy, MergeRecipe};
use tvmerge_core::task_vector::{extract, Strictness};
use tvmerge_core::tensor_store::METADATA_KEY;
use tvmerge_core::ties::{ties_merge, TiesOptions, TrimScope, DEFAULT_DENSITY};
use tvmerge_core::{load_checkpoint, save_checkpoint, Checkpoint, TaskVector};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "tvmerge", version, about = "Task-vector arithmetic on model checkpoints")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    /// Worker threads for per-tensor work (0 = all cores).
    #[arg(long, global = true, env = "TVMERGE_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Write the task vector `fine-tuned - pretrained`.
    Extract(ExtractArgs),
    /// Run a TOML merge recipe.
    Merge(MergeArgs),
    /// TIES-merge task vectors into a pretrained checkpoint.
    Ties(TiesArgs),
    /// Write the analogy vector `tv3 + (tv2 - tv1)`.
    Analogy(AnalogyArgs),
    /// Synthesize an ST vector through a pivot language.
    Synthesize(SynthesizeArgs),
    /// Grid-search recipe coefficients.
    Search(search::SearchArgs),
    /// Run a toy-harness scenario.
    Demo(DemoArgs),
    /// List tensors, shapes, dtypes and metadata of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
struct ExtractArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    ft: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    pt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip tensors absent from the pretrained checkpoint instead of failing.
    #[arg(long)]
    allow_missing: bool,
}

#[derive(Args, Debug, Serialize)]
struct MergeArgs {
    recipe: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Accept vector files without the `kind=task_vector` tag.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct TiesArgs {
    #[arg(long)]
    pt: PathBuf,
    /// Task vector to merge; repeat for each operand.
    #[arg(long = "tv", required = true)]
    tvs: Vec<PathBuf>,
    /// Fraction of entries kept by trimming.
    #[arg(long, default_value_t = DEFAULT_DENSITY)]
    density: f64,
    /// Trim each tensor separately instead of the whole vector.
    #[arg(long)]
    per_tensor_trim: bool,
    /// Coefficient applied to the merged delta.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda: f32,
    /// Language-control vector added after TIES.
    #[arg(long)]
    lc: Option<PathBuf>,
    #[arg(long, requires = "lc", allow_negative_numbers = true)]
    lambda_lc: Option<f32>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct AnalogyArgs {
    #[arg(long)]
    tv3: PathBuf,
    #[arg(long)]
    tv2: PathBuf,
    #[arg(long)]
    tv1: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct SynthesizeArgs {
    /// ST vector for source -> pivot.
    #[arg(long)]
    st_pivot: PathBuf,
    /// MT vector for source -> target.
    #[arg(long)]
    mt_target: PathBuf,
    /// MT vector for source -> pivot.
    #[arg(long)]
    mt_pivot: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda_st: f32,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda_mt: f32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
struct DemoArgs {
    /// expansion, expansion_ties or synthesis.
    #[arg(long, default_value = "expansion")]
    scenario: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for report.jsonl and the generated checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    path: PathBuf,
}

/// A failed run, split by who is at fault.
#[derive(Debug)]
pub enum Failure {
    User(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::User(_) => 1,
            Failure::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::User(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl From<tvmerge_core::Error> for Failure {
    fn from(e: tvmerge_core::Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    let msg = format!("{}: {e}", path.display());
    match e.kind() {
        std::io::ErrorKind::NotFound => Failure::User(msg),
        _ => Failure::Internal(msg),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Refuse to write over one of the inputs.
pub fn guard_output(out: &Path, inputs: &[&Path]) -> Outcome {
    let Ok(out_abs) = fs::canonicalize(out) else {
        return Ok(());
    };
    for input in inputs {
        if fs::canonicalize(input).is_ok_and(|p| p == out_abs) {
            return Err(Failure::User(format!(
                "output {} would overwrite an input",
                out.display()
            )));
        }
    }
    Ok(())
}

pub fn load_vector(path: &Path, force: bool) -> Outcome<TaskVector> {
    let ck = load_checkpoint(path, false)?;
    TaskVector::from_checkpoint(ck, force).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn write(ck: &Checkpoint, out: &Path) -> Outcome {
    save_checkpoint(ck, out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| writeln!(buf, "tvmerge: {}: {}", record.level().as_str().to_lowercase(), record.args()))
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.quiet);
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("tvmerge: error: {e}");
            return ExitCode::from(2);
        }
    }
    log::info!("tvmerge {VERSION}");
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tvmerge: error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(command: &Command) -> Outcome {
    if let Command::Merge(args) = command {
        return merge(args);
    }
    if !matches!(command, Command::Search(_)) {
        let json = serde_json::to_string(command).map_err(|e| Failure::Internal(e.to_string()))?;
        log::info!("recipe sha256={}", sha256_hex(json.as_bytes()));
    }
    match command {
        Command::Extract(a) => {
            guard_output(&a.out, &[&a.ft, &a.pt])?;
            let ft = load_checkpoint(&a.ft, false)?;
            let pt = load_checkpoint(&a.pt, false)?;
            let strictness = if a.allow_missing { Strictness::AllowMissing } else { Strictness::Strict };
            write(&extract(&ft, &pt, strictness)?.to_checkpoint(), &a.out)
        }
        Command::Ties(a) => ties(a),
        Command::Analogy(a) => {
            guard_output(&a.out, &[&a.tv3, &a.tv2, &a.tv1])?;
            let tv3 = load_vector(&a.tv3, a.force)?;
            let tv2 = load_vector(&a.tv2, a.force)?;
            let tv1 = load_vector(&a.tv1, a.force)?;
            write(&task_analogy(&tv3, &tv2, &tv1)?.to_checkpoint(), &a.out)
        }
        Command::Synthesize(a) => {
            guard_output(&a.out, &[&a.st_pivot, &a.mt_target, &a.mt_pivot])?;
            let st = load_vector(&a.st_pivot, a.force)?;
            let mt_t = load_vector(&a.mt_target, a.force)?;
            let mt_p = load_vector(&a.mt_pivot, a.force)?;
            write(&synthesize_st(&st, &mt_t, &mt_p, a.lambda_st, a.lambda_mt)?.to_checkpoint(), &a.out)
        }
        Command::Search(a) => search::run(a),
        Command::Demo(a) => demo(a),
        Command::Inspect(a) => inspect(&a.path),
        Command::Merge(_) => unreachable!(),
    }
}

fn merge(a: &MergeArgs) -> Outcome {
    let recipe = MergeRecipe::from_file(&a.recipe)?;
    log::info!("recipe sha256={}", recipe.hash());
    let base = a.recipe.parent().unwrap_or(Path::new(""));
    let mut inputs: Vec<PathBuf> = recipe.operand_paths().iter().map(|p| base.join(p)).collect();
    inputs.push(a.recipe.clone());
    guard_output(&a.out, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let out = recipe.execute(base, a.force)?;
    write(&out, &a.out)
}

fn ties(a: &TiesArgs) -> Outcome {
    let mut inputs: Vec<&Path> = vec![&a.pt];
    inputs.extend(a.tvs.iter().map(PathBuf::as_path));
    inputs.extend(a.lc.as_deref());
    guard_output(&a.out, &inputs)?;

    let pt = load_checkpoint(&a.pt, false)?;
    let tvs = a.tvs.iter().map(|p| load_vector(p, a.force)).collect::<Outcome<Vec<_>>>()?;
    let lc = match &a.lc {
        Some(p) => Some((load_vector(p, a.force)?, a.lambda_lc.unwrap_or(1.0))),
        None => None,
    };
    let opts = TiesOptions {
        density: a.density,
        lambda: a.lambda,
        scope: if a.per_tensor_trim { TrimScope::PerTensor } else { TrimScope::Global },
        per_vector_lambdas: None,
    };
    let refs: Vec<&TaskVector> = tvs.iter().collect();
    let out = ties_merge(&pt, &refs, &opts, lc.as_ref().map(|(tv, l)| (tv, *l)))?;
    write(&out, &a.out)
}

fn demo(a: &DemoArgs) -> Outcome {
    let scenario: Scenario = a.scenario.parse()?;
    let bundle = run_demo(scenario, a.seed, &DemoConfig::default())?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let report = a.out.join("report.jsonl");
    fs::write(&report, bundle.to_jsonl()).map_err(|e| io_failure(&report, e))?;
    for (name, ck) in &bundle.checkpoints {
        save_checkpoint(ck, a.out.join(format!("{name}.safetensors")))?;
    }
    log::info!(
        "{scenario} seed {}: {} rows, {} checkpoints in {}",
        a.seed,
        bundle.rows.len(),
        bundle.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn inspect(path: &Path) -> Outcome {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    // decoding validates the file; the raw header keeps the stored dtypes
    tvmerge_core::tensor_store::decode(&bytes, true)?;
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("decoded file has a length prefix")) as usize;
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| Failure::Internal(e.to_string()))?;

    let mut stdout = std::io::stdout().lock();
    let mut emit = |line: String| writeln!(stdout, "{line}").map_err(|e| Failure::Internal(e.to_string()));
    for (name, info) in &header {
        if name == METADATA_KEY {
            continue;
        }
        emit(format!("{name}\t{}\t{}", info["dtype"].as_str().unwrap_or("?"), info["shape"]))?;
    }
    if let Some(serde_json::Value::Object(meta)) = header.get(METADATA_KEY) {
        for (k, v) in meta {
            emit(format!("# {k} = {}", v.as_str().unwrap_or_default()))?;
        }
    }
    Ok(())
}
