//! `tvmerge search`: fill a recipe template from a coefficient grid, score
//! every merged model and keep the best.
//!
//! The grid file lists coefficients in order; the last one varies fastest.
//!
//! ```toml
//! maximize = true
//!
//! [[coefficient]]
//! name = "lambda_lc"
//! values = [0.2, 0.5, 1.0]   # omit for 0.2..=1.3 in steps of 0.1
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use tvmerge_core::coeff_search::{default_grid, grid_search, grid_search_par, Assignment, SearchSpace};
use tvmerge_core::harness::{evaluate, make_data, DemoConfig, ToyTask, ToyTaskSpec};
use tvmerge_core::merge_engine::MergeRecipe;
use tvmerge_core::{save_checkpoint, Checkpoint};

use crate::{guard_output, io_failure, sha256_hex, Failure, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Exact-match rate on the toy translation task.
    Toy,
    /// Last line printed by a shell command; the candidate checkpoint path is
    /// in `TVMERGE_CANDIDATE`.
    Command,
}

#[derive(Args, Debug, Serialize)]
pub struct SearchArgs {
    /// Recipe with `${name}` placeholders for the searched coefficients.
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    /// JSONL file receiving one record per evaluated assignment.
    #[arg(long)]
    trace: PathBuf,
    /// Also write the best merged checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metric::Toy)]
    metric: Metric,
    /// Scoring command for `--metric command`.
    #[arg(long = "command", required_if_eq("metric", "command"))]
    score_command: Option<String>,
    /// Toy task seed for `--metric toy`.
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
    /// Comma-separated toy languages to evaluate on.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
    toy_languages: Vec<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    #[serde(default = "yes")]
    maximize: bool,
    coefficient: Vec<GridEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridEntry {
    name: String,
    values: Option<Vec<f64>>,
}

fn yes() -> bool {
    true
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    index: usize,
    assignment: &'a Assignment,
    score: f64,
    recipe_sha256: String,
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn load_space(path: &Path) -> Outcome<SearchSpace> {
    let grid: GridFile =
        toml::from_str(&read_text(path)?).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
    let grids = grid
        .coefficient
        .into_iter()
        .map(|c| (c.name, c.values.unwrap_or_else(default_grid)))
        .collect();
    Ok(SearchSpace::new(grids, grid.maximize)?)
}

/// Substitute every `${name}`; any placeholder left over is an error.
fn fill(template: &str, assignment: &Assignment) -> Outcome<MergeRecipe> {
    let mut text = template.to_string();
    for (name, value) in assignment.iter() {
        text = text.replace(&format!("${{{name}}}"), &format!("{value:?}"));
    }
    if let Some(start) = text.find("${") {
        let rest = &text[start..];
        let end = rest.find('}').map_or(rest.len(), |i| i + 1);
        return Err(Failure::User(format!("template placeholder {} has no grid", &rest[..end])));
    }
    Ok(MergeRecipe::parse(&text)?)
}

struct Toy {
    spec: ToyTaskSpec,
    data: Vec<tvmerge_core::harness::Example>,
}

impl Toy {
    fn new(seed: u64, languages: &[usize]) -> Outcome<Self> {
        let cfg = DemoConfig::default();
        let mut spec = ToyTaskSpec::new(cfg.vocab_size, cfg.num_languages, seed)?;
        spec.mt_instruction_value = cfg.mt_instruction_value;
        let mut data = Vec::new();
        for &l in languages {
            data.extend(make_data(&spec, &ToyTask::Translate(l))?);
        }
        Ok(Self { spec, data })
    }

    fn score(&self, model: &Checkpoint) -> Outcome<f64> {
        Ok(evaluate(&self.spec, model, &self.data)?.dev_score())
    }
}

fn run_command(command: &str, model: &Checkpoint) -> Outcome<f64> {
    let dir = tempfile::tempdir().map_err(|e| Failure::Internal(e.to_string()))?;
    let path = dir.path().join("candidate.safetensors");
    save_checkpoint(model, &path)?;
    let output = Command::new("sh")
        .arg("-c")
        .arg(command)
        .env("TVMERGE_CANDIDATE", &path)
        .output()
        .map_err(|e| Failure::User(format!("cannot run `{command}`: {e}")))?;
    if !output.status.success() {
        return Err(Failure::User(format!("`{command}` exited with {}", output.status)));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let line = stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    line.trim()
        .parse()
        .map_err(|_| Failure::User(format!("`{command}` printed `{line}`, expected a number")))
}

pub fn run(a: &SearchArgs) -> Outcome {
    let template = read_text(&a.template)?;
    let space = load_space(&a.grid)?;
    log::info!(
        "recipe sha256={} (template), {} assignments",
        sha256_hex(template.as_bytes()),
        space.len()
    );
    let base = a.template.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut inputs: Vec<&Path> = vec![&a.template, &a.grid];
    inputs.extend(a.out.as_deref());
    guard_output(&a.trace, &inputs)?;
    if let Some(out) = &a.out {
        guard_output(out, &[&a.template, &a.grid])?;
    }

    let build = |assignment: &Assignment| -> Outcome<Checkpoint> {
        Ok(fill(&template, assignment)?.execute(&base, a.force)?)
    };
    // evaluation errors keep their user/internal split
    let first_error: std::sync::Mutex<Option<Failure>> = std::sync::Mutex::new(None);
    let record = |f: Failure| -> String {
        let msg = f.to_string();
        first_error.lock().expect("no poisoned lock").get_or_insert(f);
        msg
    };
    let result = match a.metric {
        Metric::Toy => {
            let toy = Toy::new(a.toy_seed, &a.toy_languages)?;
            grid_search_par(&space, |asg| build(asg).and_then(|m| toy.score(&m)).map_err(&record))
        }
        Metric::Command => {
            let command = a.score_command.as_deref().expect("clap requires --command");
            grid_search(&space, |asg| build(asg).and_then(|m| run_command(command, &m)).map_err(&record))
        }
    };
    let result = match result {
        Ok(r) => r,
        Err(e) => return Err(first_error.into_inner().ok().flatten().unwrap_or_else(|| e.into())),
    };

    let mut jsonl = Vec::new();
    for (index, (assignment, score)) in result.trace.iter().enumerate() {
        let hash = fill(&template, assignment)?.hash();
        let rec = TraceRecord {
            index,
            assignment,
            score: *score,
            recipe_sha256: hash,
        };
        serde_json::to_writer(&mut jsonl, &rec).map_err(|e| Failure::Internal(e.to_string()))?;
        jsonl.push(b'\n');
    }
    fs::write(&a.trace, &jsonl).map_err(|e| io_failure(&a.trace, e))?;

    let best_recipe = fill(&template, &result.best)?;
    log::info!(
        "best {} score={} recipe sha256={}",
        result.best,
        result.best_score,
        best_recipe.hash()
    );
    let summary = serde_json::json!({ "best": result.best, "score": result.best_score, "recipe_sha256": best_recipe.hash() });
    writeln!(std::io::stdout(), "{summary}").map_err(|e| Failure::Internal(e.to_string()))?;
    if let Some(out) = &a.out {
        save_checkpoint(&best_recipe.execute(&base, a.force)?, out)?;
        log::info!("wrote {}", out.display());
    }
    Ok(())
}
