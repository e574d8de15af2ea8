//! Merging formulas: linear task-vector addition, LoRA-aware merging,
//! language-control augmentation and task-analogy synthesis.
//!
//! Every weighted sum accumulates in term order, starting from the first
//! scaled term. Float addition is not associative, so the order is part of
//! the contract: reordering terms changes results only at rounding level.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_store::{compat_of, push_provenance, Checkpoint, Tensor};
use crate::task_vector::{zip_with, LoraAdapter, LoraPair, Provenance, TaskVector};

pub mod recipe;

pub use recipe::{MergeMethod, MergeRecipe, RecipeTerm, TermSource};

/// Coefficient range searched in practice; values outside it only warn.
pub const SEARCHED_LAMBDA_RANGE: RangeInclusive<f32> = 0.2..=1.3;

pub fn warn_if_unusual_lambda(what: &str, lambda: f32) {
    if !SEARCHED_LAMBDA_RANGE.contains(&lambda) {
        log::warn!(
            "{what}: coefficient {lambda} lies outside the usual range [{}, {}]",
            SEARCHED_LAMBDA_RANGE.start(),
            SEARCHED_LAMBDA_RANGE.end()
        );
    }
}

fn check_lambda(lambda: f32) -> Result<()> {
    if lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("coefficient must be finite, got {lambda}")))
    }
}

fn term_summary(terms: &[(&TaskVector, f32)]) -> String {
    terms
        .iter()
        .map(|(tv, l)| format!("{}*{}", l, tv.provenance.label()))
        .collect::<Vec<_>>()
        .join(" + ")
}

/// `Σ λ_i τ_i`, accumulated left to right per element.
pub fn weighted_sum(terms: &[(&TaskVector, f32)]) -> Result<BTreeMap<String, Tensor>> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("at least one merge term is required".into()))?;
    for (tv, lambda) in terms {
        check_lambda(*lambda)?;
        let report = compat_of(&first.0.deltas, &tv.deltas);
        if !report.is_compatible() {
            return Err(Error::Incompatible(report.to_string()));
        }
    }
    first
        .0
        .deltas
        .par_iter()
        .map(|(name, t)| {
            let mut acc: Vec<f32> = t.data().iter().map(|&v| first.1 * v).collect();
            for (tv, lambda) in rest {
                for (a, &v) in acc.iter_mut().zip(tv.deltas[name].data()) {
                    *a += lambda * v;
                }
            }
            if let Some(offset) = acc.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    offset,
                });
            }
            Ok((name.clone(), t.with_data(acc)))
        })
        .collect()
}

fn add_to_base(pretrained: &Checkpoint, delta: &BTreeMap<String, Tensor>) -> Result<Checkpoint> {
    let tensors = zip_with(&pretrained.tensors, delta, |p, d| p + d)?;
    Ok(Checkpoint {
        tensors,
        metadata: pretrained.metadata.clone(),
    })
}

/// `θ = θ_pt + Σ λ_i τ_i`.
pub fn linear_merge(pretrained: &Checkpoint, terms: &[(&TaskVector, f32)]) -> Result<Checkpoint> {
    let sum = weighted_sum(terms)?;
    let mut out = add_to_base(pretrained, &sum)?;
    out.push_provenance(format!("linear_merge({})", term_summary(terms)));
    Ok(out)
}

/// `θ = θ_pt + Σ λ_i τ_st_i + λ_lc τ_lc`. The LC term is summed last.
pub fn merge_with_lc(
    pretrained: &Checkpoint,
    st_terms: &[(&TaskVector, f32)],
    lc: &TaskVector,
    lambda_lc: f32,
) -> Result<Checkpoint> {
    if st_terms.is_empty() {
        return Err(Error::InvalidArgument("at least one merge term is required".into()));
    }
    let mut all: Vec<(&TaskVector, f32)> = st_terms.to_vec();
    all.push((lc, lambda_lc));
    let sum = weighted_sum(&all)?;
    let mut out = add_to_base(pretrained, &sum)?;
    out.push_provenance(format!("linear_merge({})", term_summary(st_terms)));
    out.push_provenance(format!("language_control({}*{})", lambda_lc, lc.provenance.label()));
    Ok(out)
}

/// `W = W_pt + Σ λ_i B_i A_i` per adapted weight. Keys no adapter touches are
/// copied from the base without forming a dense zero delta.
pub fn lora_merge(pretrained: &Checkpoint, adapters: &[(&LoraAdapter, f32)]) -> Result<Checkpoint> {
    if adapters.is_empty() {
        return Err(Error::InvalidArgument("at least one adapter is required".into()));
    }
    let mut per_adapter = Vec::with_capacity(adapters.len());
    for (adapter, lambda) in adapters {
        check_lambda(*lambda)?;
        per_adapter.push((adapter.target_deltas(pretrained)?, *lambda));
    }
    let tensors = pretrained
        .tensors
        .par_iter()
        .map(|(name, base)| {
            let mut acc: Option<Vec<f32>> = None;
            for (deltas, lambda) in &per_adapter {
                if let Some(d) = deltas.get(name) {
                    match acc.as_mut() {
                        None => acc = Some(d.data().iter().map(|&v| lambda * v).collect()),
                        Some(acc) => {
                            for (a, &v) in acc.iter_mut().zip(d.data()) {
                                *a += lambda * v;
                            }
                        }
                    }
                }
            }
            let out = match acc {
                None => base.clone(),
                Some(acc) => {
                    let data: Vec<f32> = base.data().iter().zip(&acc).map(|(&p, &d)| p + d).collect();
                    if let Some(offset) = data.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            name: name.clone(),
                            offset,
                        });
                    }
                    base.with_data(data)
                }
            };
            Ok((name.clone(), out))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut out = Checkpoint {
        tensors,
        metadata: pretrained.metadata.clone(),
    };
    let summary: Vec<String> = adapters
        .iter()
        .map(|(a, l)| format!("{l}*lora(rank={})", a.rank))
        .collect();
    out.push_provenance(format!("lora_merge({})", summary.join(" + ")));
    Ok(out)
}

/// Summed `B` factors, summed `A` factors and the `(out, rank, in)` dims.
type FactorSums = (Vec<f32>, Vec<f32>, (usize, usize, usize));

/// Comparison oracle: `W = W_pt + (Σ λ_i s_i B_i)(Σ λ_i A_i)` where `s_i` is
/// the adapter scale. This sums the factors before multiplying, which is not
/// the same as summing the products. Adapters lacking a target contribute
/// nothing to it; adapters sharing a target must share its rank.
pub fn naive_product_merge(pretrained: &Checkpoint, adapters: &[(&LoraAdapter, f32)]) -> Result<Checkpoint> {
    if adapters.is_empty() {
        return Err(Error::InvalidArgument("at least one adapter is required".into()));
    }
    let mut factor_sums: BTreeMap<String, FactorSums> = BTreeMap::new();
    for (adapter, lambda) in adapters {
        check_lambda(*lambda)?;
        // validates targets and shapes
        adapter.target_deltas(pretrained)?;
        for (name, pair) in &adapter.targets {
            let dims = pair.dims()?;
            let entry = factor_sums
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; dims.0 * dims.1], vec![0.0; dims.1 * dims.2], dims));
            if entry.2 != dims {
                return Err(Error::Lora(format!(
                    "target `{name}`: factor shapes {dims:?} differ from {:?}; cannot sum factors",
                    entry.2
                )));
            }
            let wb = lambda * adapter.scale;
            for (s, &v) in entry.0.iter_mut().zip(pair.b.data()) {
                *s += wb * v;
            }
            for (s, &v) in entry.1.iter_mut().zip(pair.a.data()) {
                *s += lambda * v;
            }
        }
    }
    let mut out = pretrained.clone();
    for (name, (b, a, (rows, rank, cols))) in factor_sums {
        let pair = LoraPair::new(Tensor::new(vec![rows, rank], b)?, Tensor::new(vec![rank, cols], a)?)?;
        let delta = pair.delta(1.0)?;
        let base = out.tensors.get_mut(&name).expect("target validated against keyspace");
        for (w, &d) in base.data_mut().iter_mut().zip(delta.data()) {
            *w += d;
        }
        if let Some(offset) = base.first_non_finite() {
            return Err(Error::NonFinite { name, offset });
        }
    }
    out.push_provenance(format!("naive_product_merge(n={})", adapters.len()));
    Ok(out)
}

/// `τ4 = τ3 + (τ2 − τ1)` for `task1 : task2 :: task3 : task4`.
pub fn task_analogy(tv3: &TaskVector, tv2: &TaskVector, tv1: &TaskVector) -> Result<TaskVector> {
    let diff = zip_with(&tv2.deltas, &tv1.deltas, |b, c| b - c)?;
    let deltas = zip_with(&tv3.deltas, &diff, |a, d| a + d)?;
    Ok(TaskVector::new(
        deltas,
        Provenance::new(format!(
            "task_analogy({} + {} - {})",
            tv3.provenance.label(),
            tv2.provenance.label(),
            tv1.provenance.label()
        )),
    )
    .with_role("analogy"))
}

/// Pivot synthesis: `λ_st τ_st(s→p) + λ_mt (τ_mt(s→t) − τ_mt(s→p))`.
pub fn synthesize_st(
    st_pivot: &TaskVector,
    mt_target: &TaskVector,
    mt_pivot: &TaskVector,
    lambda_st: f32,
    lambda_mt: f32,
) -> Result<TaskVector> {
    check_lambda(lambda_st)?;
    check_lambda(lambda_mt)?;
    let diff = zip_with(&mt_target.deltas, &mt_pivot.deltas, |b, c| b - c)?;
    let deltas = zip_with(&st_pivot.deltas, &diff, |a, d| lambda_st * a + lambda_mt * d)?;
    Ok(TaskVector::new(
        deltas,
        Provenance::new(format!(
            "synthesize_st({}*{} + {}*({} - {}))",
            lambda_st,
            st_pivot.provenance.label(),
            lambda_mt,
            mt_target.provenance.label(),
            mt_pivot.provenance.label()
        )),
    )
    .with_role("synthesized"))
}

/// Source/target (and optional pivot) languages of a translation direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguagePair {
    source: String,
    target: String,
    pivot: Option<String>,
}

impl LanguagePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>, pivot: Option<String>) -> Result<Self> {
        let (source, target) = (source.into(), target.into());
        if source == target {
            return Err(Error::InvalidArgument(format!("source and target are both `{source}`")));
        }
        if pivot.as_deref() == Some(target.as_str()) {
            return Err(Error::InvalidArgument(format!("pivot cannot equal the target `{target}`")));
        }
        Ok(Self { source, target, pivot })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn pivot(&self) -> Option<&str> {
        self.pivot.as_deref()
    }
}

pub(crate) fn mark_recipe(ck: &mut Checkpoint, hash: &str, operands: &[String]) {
    push_provenance(&mut ck.metadata, format!("recipe sha256={hash}"));
    push_provenance(&mut ck.metadata, format!("operands=[{}]", operands.join(",")));
}
