//! End-to-end scenarios on the toy task.
//!
//! * `expansion`: merge two single-language ST fine-tunes linearly and with
//!   TIES, each with and without the language-control (LC) vector.
//! * `expansion_ties`: the TIES rows only, with global and per-tensor trimming.
//! * `synthesis`: build an ST vector for a language that has no ST data from
//!   a pivot ST vector and two MT vectors, then add LC and merge it back.
//!
//! The LC coefficient is always tuned by grid search over the default grid
//! on the evaluation set, maximizing the fraction of examples that get both
//! the language token and the translation right.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{evaluate, init_model, make_data, train, Dataset, EvalReport, Head, ToyTask, ToyTaskSpec, TrainConfig};
use crate::coeff_search::{default_grid, grid_search, SearchSpace};
use crate::error::{Error, Result};
use crate::merge_engine::{linear_merge, merge_with_lc, synthesize_st};
use crate::tensor_store::Checkpoint;
use crate::task_vector::{apply, extract, Strictness, TaskVector};
use crate::ties::{ties_merge, TiesOptions, TrimScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Expansion,
    ExpansionTies,
    Synthesis,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expansion" => Ok(Scenario::Expansion),
            "expansion_ties" | "expansion-ties" => Ok(Scenario::ExpansionTies),
            "synthesis" => Ok(Scenario::Synthesis),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario `{other}` (expected expansion, expansion_ties or synthesis)"
            ))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Expansion => "expansion",
            Scenario::ExpansionTies => "expansion_ties",
            Scenario::Synthesis => "synthesis",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoConfig {
    pub vocab_size: usize,
    pub num_languages: usize,
    /// Narrower than [`super::DEFAULT_HIDDEN`]: with fewer units the
    /// fine-tunes lean on shared features, which is what makes merges confuse.
    pub hidden: usize,
    pub mt_instruction_value: f32,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lc_epochs: usize,
    /// Coefficient for each ST vector in the linear merges.
    pub st_lambda: f32,
    /// Shared TIES coefficient.
    pub ties_lambda: f32,
    pub ties_density: f64,
    pub lambda_st: f32,
    pub lambda_mt: f32,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            vocab_size: ToyTaskSpec::DEFAULT_VOCAB,
            num_languages: ToyTaskSpec::DEFAULT_LANGUAGES,
            hidden: 12,
            mt_instruction_value: ToyTaskSpec::DEFAULT_MT_VALUE,
            learning_rate: 1.5,
            pretrain_epochs: 500,
            finetune_epochs: 100,
            lc_epochs: 300,
            st_lambda: 0.65,
            ties_lambda: 1.0,
            ties_density: 0.5,
            lambda_st: 1.0,
            lambda_mt: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scenario: Scenario,
    pub seed: u64,
    pub row: String,
    /// Coefficients used to build this row.
    pub coefficients: BTreeMap<String, f64>,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub scenario: Scenario,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    /// Named models and vectors produced along the way.
    pub checkpoints: Vec<(String, Checkpoint)>,
}

impl ReportBundle {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.row == name)
    }

    /// One JSON record per row, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("report rows serialize"));
            out.push('\n');
        }
        out
    }
}

struct Builder<'a> {
    spec: &'a ToyTaskSpec,
    scenario: Scenario,
    seed: u64,
    rows: Vec<ReportRow>,
    checkpoints: Vec<(String, Checkpoint)>,
}

impl Builder<'_> {
    fn row(&mut self, name: &str, model: &Checkpoint, data: &Dataset, coefficients: &[(&str, f64)]) -> Result<()> {
        let eval = evaluate(self.spec, model, data)?;
        self.rows.push(ReportRow {
            scenario: self.scenario,
            seed: self.seed,
            row: name.to_string(),
            coefficients: coefficients.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            eval,
        });
        Ok(())
    }

    fn keep(&mut self, name: &str, ck: Checkpoint) {
        self.checkpoints.push((name.to_string(), ck));
    }
}

/// Pick λ_LC on the default grid by maximizing the dev score of `build(λ_LC)`.
pub fn tune_lc<F>(spec: &ToyTaskSpec, data: &Dataset, build: F) -> Result<f32>
where
    F: Fn(f32) -> Result<Checkpoint>,
{
    let space = SearchSpace::new(vec![("lambda_lc".into(), default_grid())], true)?;
    let result = grid_search(&space, |a| -> Result<f64> {
        let model = build(a.get("lambda_lc").expect("declared") as f32)?;
        Ok(evaluate(spec, &model, data)?.dev_score())
    })?;
    Ok(result.best.get("lambda_lc").expect("declared") as f32)
}

struct Trained {
    pretrained: Checkpoint,
    cfg: DemoConfig,
}

impl Trained {
    fn new(spec: &ToyTaskSpec, cfg: &DemoConfig, seed: u64) -> Result<Self> {
        let init = init_model(spec, cfg.hidden, seed);
        let pretrained = train(
            spec,
            &init,
            &make_data(spec, &ToyTask::Transcribe)?,
            &TrainConfig {
                learning_rate: cfg.learning_rate,
                epochs: cfg.pretrain_epochs,
                ..Default::default()
            },
        )?;
        Ok(Self {
            pretrained,
            cfg: cfg.clone(),
        })
    }

    fn fine_tune(&self, spec: &ToyTaskSpec, task: &ToyTask, role: &str) -> Result<(Checkpoint, TaskVector)> {
        let frozen = match task {
            ToyTask::LanguageControl(_) => [Head::Translation].into(),
            _ => Default::default(),
        };
        let epochs = match task {
            ToyTask::LanguageControl(_) => self.cfg.lc_epochs,
            _ => self.cfg.finetune_epochs,
        };
        let model = train(
            spec,
            &self.pretrained,
            &make_data(spec, task)?,
            &TrainConfig {
                learning_rate: self.cfg.learning_rate,
                epochs,
                frozen_heads: frozen,
            },
        )?;
        let tv = extract(&model, &self.pretrained, Strictness::Strict)?.with_role(role);
        Ok((model, tv))
    }
}

fn union(parts: &[Dataset]) -> Dataset {
    parts.iter().flatten().cloned().collect()
}

pub fn run_demo(scenario: Scenario, seed: u64, cfg: &DemoConfig) -> Result<ReportBundle> {
    let mut spec = ToyTaskSpec::new(cfg.vocab_size, cfg.num_languages, seed)?;
    spec.mt_instruction_value = cfg.mt_instruction_value;
    if spec.num_languages < 2 {
        return Err(Error::InvalidArgument("demo scenarios need at least two languages".into()));
    }
    let mut b = Builder {
        spec: &spec,
        scenario,
        seed,
        rows: Vec::new(),
        checkpoints: Vec::new(),
    };
    let base = Trained::new(&spec, cfg, seed)?;
    let pt = &base.pretrained;
    b.keep("pretrained", pt.clone());
    match scenario {
        Scenario::Expansion | Scenario::ExpansionTies => expansion(&mut b, &base, scenario)?,
        Scenario::Synthesis => synthesis(&mut b, &base)?,
    }
    Ok(ReportBundle {
        scenario,
        seed,
        rows: b.rows,
        checkpoints: b.checkpoints,
    })
}

fn expansion(b: &mut Builder, base: &Trained, scenario: Scenario) -> Result<()> {
    let spec = b.spec;
    let cfg = &base.cfg;
    let pt = &base.pretrained;
    let (l1, l2) = (0, 1);
    let data = union(&[
        make_data(spec, &ToyTask::Translate(l1))?,
        make_data(spec, &ToyTask::Translate(l2))?,
    ]);
    let (ft1, tv1) = base.fine_tune(spec, &ToyTask::Translate(l1), "st:L1")?;
    let (ft2, tv2) = base.fine_tune(spec, &ToyTask::Translate(l2), "st:L2")?;
    let (_, lc) = base.fine_tune(spec, &ToyTask::LanguageControl(vec![l1, l2]), "lc")?;
    for (name, tv) in [("tv-st-L1", &tv1), ("tv-st-L2", &tv2), ("tv-lc", &lc)] {
        b.keep(name, tv.to_checkpoint());
    }

    b.row("pretrained", pt, &data, &[])?;
    b.row("ft-L1", &ft1, &data, &[])?;
    b.row("ft-L2", &ft2, &data, &[])?;

    let lam = cfg.st_lambda;
    let st_terms = [(&tv1, lam), (&tv2, lam)];

    if scenario == Scenario::Expansion {
        let linear = linear_merge(pt, &st_terms)?;
        let lambda_lc = tune_lc(spec, &data, |l| merge_with_lc(pt, &st_terms, &lc, l))?;
        let linear_lc = merge_with_lc(pt, &st_terms, &lc, lambda_lc)?;

        // LC on models that do not confuse languages
        let ft1_lc = merge_with_lc(pt, &[(&tv1, 1.0)], &lc, lambda_lc)?;
        let ft2_lc = merge_with_lc(pt, &[(&tv2, 1.0)], &lc, lambda_lc)?;
        let pt_lc = apply(pt, &crate::task_vector::scale(&lc, lambda_lc)?)?;
        let l = lambda_lc as f64;
        b.row("pretrained+lc", &pt_lc, &data, &[("lambda_lc", l)])?;
        b.row("ft-L1+lc", &ft1_lc, &data, &[("lambda_lc", l)])?;
        b.row("ft-L2+lc", &ft2_lc, &data, &[("lambda_lc", l)])?;
        b.row("linear-merge", &linear, &data, &[("lambda", lam as f64)])?;
        b.row("linear+lc", &linear_lc, &data, &[("lambda", lam as f64), ("lambda_lc", l)])?;
        b.keep("linear-merge", linear);
        b.keep("linear+lc", linear_lc);
    }

    let scopes: &[(TrimScope, &str)] = match scenario {
        Scenario::Expansion => &[(TrimScope::Global, "ties")],
        _ => &[(TrimScope::Global, "ties"), (TrimScope::PerTensor, "ties-per-tensor")],
    };
    for &(scope, name) in scopes {
        let opts = TiesOptions {
            density: cfg.ties_density,
            lambda: cfg.ties_lambda,
            scope,
            per_vector_lambdas: None,
        };
        let ties = ties_merge(pt, &[&tv1, &tv2], &opts, None)?;
        let lambda_lc = tune_lc(spec, &data, |l| ties_merge(pt, &[&tv1, &tv2], &opts, Some((&lc, l))))?;
        let ties_lc = ties_merge(pt, &[&tv1, &tv2], &opts, Some((&lc, lambda_lc)))?;
        let coeffs = [("density", cfg.ties_density), ("lambda", cfg.ties_lambda as f64)];
        b.row(name, &ties, &data, &coeffs)?;
        b.row(
            &format!("{name}+lc"),
            &ties_lc,
            &data,
            &[coeffs[0], coeffs[1], ("lambda_lc", lambda_lc as f64)],
        )?;
        b.keep(name, ties);
        b.keep(&format!("{name}+lc"), ties_lc);
    }
    Ok(())
}

fn synthesis(b: &mut Builder, base: &Trained) -> Result<()> {
    let spec = b.spec;
    let cfg = &base.cfg;
    let pt = &base.pretrained;
    // pivot L1 has ST data; target L2 has only MT data
    let (pivot, target) = (0, 1);
    let st_pivot_data = make_data(spec, &ToyTask::Translate(pivot))?;
    let st_target_data = make_data(spec, &ToyTask::Translate(target))?;
    let both = union(&[st_pivot_data.clone(), st_target_data.clone()]);

    let (mt_p, tv_mt_p) = base.fine_tune(spec, &ToyTask::MachineTranslate(pivot), "mt:L1")?;
    let (mt_t, tv_mt_t) = base.fine_tune(spec, &ToyTask::MachineTranslate(target), "mt:L2")?;
    let (st_p, tv_st_p) = base.fine_tune(spec, &ToyTask::Translate(pivot), "st:L1")?;
    // reference only: never used to build the synthesized vector
    let (st_t, _) = base.fine_tune(spec, &ToyTask::Translate(target), "st:L2")?;
    let (_, lc) = base.fine_tune(spec, &ToyTask::LanguageControl(vec![pivot, target]), "lc")?;

    b.row("pretrained", pt, &st_target_data, &[])?;
    b.row("mt-L1", &mt_p, &make_data(spec, &ToyTask::MachineTranslate(pivot))?, &[])?;
    b.row("mt-L2", &mt_t, &make_data(spec, &ToyTask::MachineTranslate(target))?, &[])?;
    b.row("st-L1", &st_p, &st_pivot_data, &[])?;
    b.row("st-L2-direct", &st_t, &st_target_data, &[])?;

    let synth = synthesize_st(&tv_st_p, &tv_mt_t, &tv_mt_p, cfg.lambda_st, cfg.lambda_mt)?;
    let synth_coeffs = [("lambda_st", cfg.lambda_st as f64), ("lambda_mt", cfg.lambda_mt as f64)];
    let synth_model = linear_merge(pt, &[(&synth, 1.0)])?;
    b.row("synthesized", &synth_model, &st_target_data, &synth_coeffs)?;
    let lambda_lc = tune_lc(spec, &st_target_data, |l| merge_with_lc(pt, &[(&synth, 1.0)], &lc, l))?;
    let synth_lc = merge_with_lc(pt, &[(&synth, 1.0)], &lc, lambda_lc)?;
    b.row(
        "synthesized+lc",
        &synth_lc,
        &st_target_data,
        &[synth_coeffs[0], synth_coeffs[1], ("lambda_lc", lambda_lc as f64)],
    )?;

    // expand the pivot ST model with the synthesized direction
    let lam = cfg.st_lambda;
    let terms = [(&tv_st_p, lam), (&synth, lam)];
    let expanded = linear_merge(pt, &terms)?;
    let exp_lc_lambda = tune_lc(spec, &both, |l| merge_with_lc(pt, &terms, &lc, l))?;
    let expanded_lc = merge_with_lc(pt, &terms, &lc, exp_lc_lambda)?;
    b.row("expanded-linear", &expanded, &both, &[("lambda", lam as f64)])?;
    b.row(
        "expanded-linear+lc",
        &expanded_lc,
        &both,
        &[("lambda", lam as f64), ("lambda_lc", exp_lc_lambda as f64)],
    )?;

    let opts = TiesOptions {
        density: cfg.ties_density,
        lambda: cfg.ties_lambda,
        ..Default::default()
    };
    let ties = ties_merge(pt, &[&tv_st_p, &synth], &opts, None)?;
    let ties_lc_lambda = tune_lc(spec, &both, |l| ties_merge(pt, &[&tv_st_p, &synth], &opts, Some((&lc, l))))?;
    let ties_lc = ties_merge(pt, &[&tv_st_p, &synth], &opts, Some((&lc, ties_lc_lambda)))?;
    let tc = [("density", cfg.ties_density), ("lambda", cfg.ties_lambda as f64)];
    b.row("expanded-ties", &ties, &both, &tc)?;
    b.row(
        "expanded-ties+lc",
        &ties_lc,
        &both,
        &[tc[0], tc[1], ("lambda_lc", ties_lc_lambda as f64)],
    )?;

    b.keep("tv-synthesized", synth.to_checkpoint());
    b.keep("tv-lc", lc.to_checkpoint());
    b.keep("synthesized", synth_model);
    b.keep("synthesized+lc", synth_lc);
    Ok(())
}
