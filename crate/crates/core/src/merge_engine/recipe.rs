//! TOML merge recipes.
//!
//! ```toml
//! method = "linear"            # linear | ties | analogy
//! pretrained = "base.safetensors"
//!
//! [[terms]]
//! vector = "st_de.safetensors"  # or: adapter = "lora_de.safetensors"
//! lambda = 0.65
//!
//! [[terms]]
//! vector = "st_fr.safetensors"
//! lambda = 0.65
//!
//! [lc]
//! vector = "lc.safetensors"
//! lambda = 0.5
//!
//! [ties]                        # only with method = "ties"
//! density = 0.5
//! lambda = 1.0
//! per_tensor = false
//! per_vector_lambdas = false
//! ```
//!
//! For `analogy` the three terms are, in order, the pivot ST vector (its
//! lambda is λ_ST), the target MT vector and the pivot MT vector (both carry
//! λ_MT). Relative paths resolve against the recipe's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{linear_merge, lora_merge, mark_recipe, merge_with_lc, synthesize_st, warn_if_unusual_lambda};
use crate::error::{Error, Result};
use crate::tensor_store::{load_checkpoint, Checkpoint};
use crate::task_vector::{materialize_lora, LoraAdapter, TaskVector};
use crate::ties::{ties_merge, TiesOptions, TrimScope, DEFAULT_DENSITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Linear,
    Ties,
    Analogy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TermSource {
    Vector(PathBuf),
    Adapter(PathBuf),
}

impl TermSource {
    pub fn path(&self) -> &Path {
        match self {
            TermSource::Vector(p) | TermSource::Adapter(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecipeTerm {
    pub source: TermSource,
    pub lambda: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LcTerm {
    pub vector: PathBuf,
    pub lambda: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiesBlock {
    pub density: f64,
    pub lambda: f32,
    pub per_tensor: bool,
    pub per_vector_lambdas: bool,
}

impl Default for TiesBlock {
    fn default() -> Self {
        Self {
            density: DEFAULT_DENSITY,
            lambda: 1.0,
            per_tensor: false,
            per_vector_lambdas: false,
        }
    }
}

/// A validated recipe with all defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub pretrained: PathBuf,
    pub terms: Vec<RecipeTerm>,
    pub lc: Option<LcTerm>,
    pub ties: Option<TiesBlock>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTerm {
    vector: Option<PathBuf>,
    adapter: Option<PathBuf>,
    lambda: Option<f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLc {
    vector: PathBuf,
    lambda: f32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTies {
    density: Option<f64>,
    lambda: Option<f32>,
    per_tensor: Option<bool>,
    per_vector_lambdas: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecipe {
    method: MergeMethod,
    pretrained: PathBuf,
    #[serde(default)]
    terms: Vec<RawTerm>,
    lc: Option<RawLc>,
    ties: Option<RawTies>,
}

fn finite(what: &str, v: f32) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Recipe(format!("{what} must be finite, got {v}")))
    }
}

impl MergeRecipe {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawRecipe = toml::from_str(text).map_err(|e| Error::Recipe(e.to_string()))?;
        if raw.terms.is_empty() {
            return Err(Error::Recipe("recipe needs at least one [[terms]] entry".into()));
        }
        let mut terms = Vec::with_capacity(raw.terms.len());
        for (i, t) in raw.terms.into_iter().enumerate() {
            let source = match (t.vector, t.adapter) {
                (Some(p), None) => TermSource::Vector(p),
                (None, Some(p)) => TermSource::Adapter(p),
                _ => {
                    return Err(Error::Recipe(format!(
                        "term {i} must set exactly one of `vector` or `adapter`"
                    )))
                }
            };
            let lambda = finite(&format!("term {i} lambda"), t.lambda.unwrap_or(1.0))?;
            terms.push(RecipeTerm { source, lambda });
        }
        let lc = raw
            .lc
            .map(|l| -> Result<LcTerm> {
                Ok(LcTerm {
                    vector: l.vector,
                    lambda: finite("lc lambda", l.lambda)?,
                })
            })
            .transpose()?;
        let ties = match (raw.method, raw.ties) {
            (MergeMethod::Ties, raw_ties) => {
                let d = TiesBlock::default();
                let block = match raw_ties {
                    None => d,
                    Some(t) => TiesBlock {
                        density: t.density.unwrap_or(d.density),
                        lambda: finite("ties lambda", t.lambda.unwrap_or(d.lambda))?,
                        per_tensor: t.per_tensor.unwrap_or(d.per_tensor),
                        per_vector_lambdas: t.per_vector_lambdas.unwrap_or(d.per_vector_lambdas),
                    },
                };
                if !(block.density > 0.0 && block.density <= 1.0) {
                    return Err(Error::Recipe(format!("ties density must be in (0, 1], got {}", block.density)));
                }
                Some(block)
            }
            (_, Some(_)) => return Err(Error::Recipe("[ties] block is only valid with method = \"ties\"".into())),
            (_, None) => None,
        };
        if raw.method == MergeMethod::Analogy {
            if terms.len() != 3 {
                return Err(Error::Recipe(format!(
                    "analogy needs exactly 3 terms (st_pivot, mt_target, mt_pivot), got {}",
                    terms.len()
                )));
            }
            if terms[1].lambda != terms[2].lambda {
                return Err(Error::Recipe(format!(
                    "analogy MT terms must share one coefficient, got {} and {}",
                    terms[1].lambda, terms[2].lambda
                )));
            }
        }
        let recipe = MergeRecipe {
            method: raw.method,
            pretrained: raw.pretrained,
            terms,
            lc,
            ties,
        };
        recipe.warn_unusual();
        Ok(recipe)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn warn_unusual(&self) {
        let uses_term_lambdas = match self.method {
            MergeMethod::Ties => self.ties.as_ref().is_some_and(|t| t.per_vector_lambdas),
            _ => true,
        };
        if uses_term_lambdas {
            for (i, t) in self.terms.iter().enumerate() {
                warn_if_unusual_lambda(&format!("term {i}"), t.lambda);
            }
        }
        if let Some(lc) = &self.lc {
            warn_if_unusual_lambda("lc", lc.lambda);
        }
    }

    /// Canonical JSON of the resolved recipe.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Every file the recipe reads, as written in the recipe.
    pub fn operand_paths(&self) -> Vec<&Path> {
        let mut paths = vec![self.pretrained.as_path()];
        paths.extend(self.terms.iter().map(|t| t.source.path()));
        if let Some(lc) = &self.lc {
            paths.push(lc.vector.as_path());
        }
        paths
    }

    /// Load operands relative to `base_dir` and run the merge. `force` accepts
    /// vector files that lack the `kind=task_vector` tag.
    pub fn execute(&self, base_dir: &Path, force: bool) -> Result<Checkpoint> {
        let resolve = |p: &Path| base_dir.join(p);
        let pretrained = load_checkpoint(resolve(&self.pretrained), false)?;

        enum Loaded {
            Vector(TaskVector),
            Adapter(LoraAdapter),
        }
        let mut loaded = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let ck = load_checkpoint(resolve(term.source.path()), false)?;
            loaded.push(match &term.source {
                TermSource::Vector(p) => Loaded::Vector(
                    TaskVector::from_checkpoint(ck, force)
                        .map_err(|e| Error::Recipe(format!("{}: {e}", p.display())))?,
                ),
                TermSource::Adapter(_) => Loaded::Adapter(LoraAdapter::from_checkpoint(&ck)?),
            });
        }
        let lc = match &self.lc {
            Some(l) => {
                let ck = load_checkpoint(resolve(&l.vector), false)?;
                let tv = TaskVector::from_checkpoint(ck, force)
                    .map_err(|e| Error::Recipe(format!("{}: {e}", l.vector.display())))?;
                Some((tv, l.lambda))
            }
            None => None,
        };

        let all_adapters = loaded.iter().all(|l| matches!(l, Loaded::Adapter(_)));
        let mut out = if self.method == MergeMethod::Linear && all_adapters && lc.is_none() {
            let adapters: Vec<(&LoraAdapter, f32)> = loaded
                .iter()
                .zip(&self.terms)
                .map(|(l, t)| match l {
                    Loaded::Adapter(a) => (a, t.lambda),
                    Loaded::Vector(_) => unreachable!(),
                })
                .collect();
            lora_merge(&pretrained, &adapters)?
        } else {
            let vectors: Vec<TaskVector> = loaded
                .into_iter()
                .map(|l| match l {
                    Loaded::Vector(v) => Ok(v),
                    Loaded::Adapter(a) => materialize_lora(&a, &pretrained),
                })
                .collect::<Result<_>>()?;
            let lc_ref = lc.as_ref().map(|(tv, l)| (tv, *l));
            match self.method {
                MergeMethod::Linear => {
                    let terms: Vec<(&TaskVector, f32)> =
                        vectors.iter().zip(&self.terms).map(|(v, t)| (v, t.lambda)).collect();
                    match lc_ref {
                        Some((lc_tv, l)) => merge_with_lc(&pretrained, &terms, lc_tv, l)?,
                        None => linear_merge(&pretrained, &terms)?,
                    }
                }
                MergeMethod::Ties => {
                    let block = self.ties.clone().unwrap_or_default();
                    let opts = TiesOptions {
                        density: block.density,
                        lambda: block.lambda,
                        scope: if block.per_tensor {
                            TrimScope::PerTensor
                        } else {
                            TrimScope::Global
                        },
                        per_vector_lambdas: block
                            .per_vector_lambdas
                            .then(|| self.terms.iter().map(|t| t.lambda).collect()),
                    };
                    let refs: Vec<&TaskVector> = vectors.iter().collect();
                    ties_merge(&pretrained, &refs, &opts, lc_ref)?
                }
                MergeMethod::Analogy => {
                    let synth = synthesize_st(
                        &vectors[0],
                        &vectors[1],
                        &vectors[2],
                        self.terms[0].lambda,
                        self.terms[1].lambda,
                    )?;
                    match lc_ref {
                        Some((lc_tv, l)) => merge_with_lc(&pretrained, &[(&synth, 1.0)], lc_tv, l)?,
                        None => linear_merge(&pretrained, &[(&synth, 1.0)])?,
                    }
                }
            }
        };
        let operands: Vec<String> = self.operand_paths().iter().map(|p| p.display().to_string()).collect();
        mark_recipe(&mut out, &self.hash(), &operands);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"
method = "linear"
pretrained = "pt.st"

[[terms]]
vector = "a.st"
lambda = 0.65

[[terms]]
adapter = "b.st"

[lc]
vector = "lc.st"
lambda = 0.4
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let r = MergeRecipe::parse(LINEAR).unwrap();
        assert_eq!(r.method, MergeMethod::Linear);
        assert_eq!(r.terms.len(), 2);
        assert_eq!(r.terms[1].lambda, 1.0);
        assert!(matches!(r.terms[1].source, TermSource::Adapter(_)));
        assert_eq!(r.lc.as_ref().unwrap().lambda, 0.4);
        assert!(r.ties.is_none());
        assert_eq!(r.operand_paths().len(), 4);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = MergeRecipe::parse(LINEAR).unwrap();
        let b = MergeRecipe::parse(LINEAR).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = MergeRecipe::parse(&LINEAR.replace("0.65", "0.7")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn ties_defaults() {
        let r = MergeRecipe::parse("method = \"ties\"\npretrained = \"p\"\n[[terms]]\nvector = \"a\"\n").unwrap();
        assert_eq!(r.ties, Some(TiesBlock::default()));
        assert_eq!(r.ties.unwrap().density, 0.5);
    }

    #[test]
    fn rejects_bad_recipes() {
        let cases = [
            "method = \"linear\"\npretrained = \"p\"\n",
            "method = \"blend\"\npretrained = \"p\"\n[[terms]]\nvector = \"a\"\n",
            "method = \"linear\"\npretrained = \"p\"\n[[terms]]\nvector = \"a\"\nadapter = \"b\"\n",
            "method = \"linear\"\npretrained = \"p\"\n[[terms]]\n",
            "method = \"linear\"\npretrained = \"p\"\nbogus = 1\n[[terms]]\nvector = \"a\"\n",
            "method = \"linear\"\npretrained = \"p\"\n[[terms]]\nvector = \"a\"\n[ties]\ndensity = 0.5\n",
            "method = \"ties\"\npretrained = \"p\"\n[[terms]]\nvector = \"a\"\n[ties]\ndensity = 0.0\n",
            "method = \"analogy\"\npretrained = \"p\"\n[[terms]]\nvector = \"a\"\n",
            "method = \"analogy\"\npretrained = \"p\"\n[[terms]]\nvector = \"a\"\n[[terms]]\nvector = \"b\"\nlambda = 1.0\n[[terms]]\nvector = \"c\"\nlambda = 0.5\n",
            "method = \"linear\"\npretrained = \"p\"\n[[terms]]\nvector = \"a\"\nlambda = nan\n",
        ];
        for c in cases {
            assert!(MergeRecipe::parse(c).is_err(), "accepted:\n{c}");
        }
    }
}
