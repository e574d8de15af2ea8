//! Task-vector algebra over checkpoints.
//!
//! A [`TaskVector`] has the same key/shape layout as the pretrained checkpoint
//! it was derived against but holds deltas. All binary operations require
//! identical key sets and shapes; per-tensor work runs on the rayon pool and
//! every output element depends only on its own operands, so results do not
//! depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_store::{compat_of, push_provenance, provenance_entries, Checkpoint, Metadata, Tensor};

pub const KIND_KEY: &str = "kind";
pub const KIND_TASK_VECTOR: &str = "task_vector";
pub const ROLE_KEY: &str = "role";
pub const MISSING_KEYS_KEY: &str = "missing_keys";
pub const LORA_B_SUFFIX: &str = ".lora_B";
pub const LORA_A_SUFFIX: &str = ".lora_A";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    /// Free-form role tag such as `st:L1`, `mt:L2`, `lc` or `synthesized`.
    pub role: Option<String>,
    pub entries: Vec<String>,
    /// Keys that were absent from the fine-tuned checkpoint and got zero deltas.
    pub missing: Vec<String>,
}

impl Provenance {
    pub fn new(entry: impl Into<String>) -> Self {
        Self {
            role: None,
            entries: vec![entry.into()],
            missing: Vec::new(),
        }
    }

    fn derived(&self, entry: impl Into<String>) -> Self {
        let mut p = self.clone();
        p.entries.push(entry.into());
        p
    }

    fn to_metadata(&self) -> Metadata {
        let mut meta = Metadata::new();
        meta.insert(KIND_KEY.into(), KIND_TASK_VECTOR.into());
        if let Some(role) = &self.role {
            meta.insert(ROLE_KEY.into(), role.clone());
        }
        if !self.missing.is_empty() {
            meta.insert(MISSING_KEYS_KEY.into(), serde_json::to_string(&self.missing).unwrap());
        }
        for e in &self.entries {
            push_provenance(&mut meta, e.clone());
        }
        meta
    }

    fn from_metadata(meta: &Metadata) -> Self {
        Self {
            role: meta.get(ROLE_KEY).cloned(),
            entries: provenance_entries(meta),
            missing: meta
                .get(MISSING_KEYS_KEY)
                .and_then(|s| serde_json::from_str(s).ok())
                .unwrap_or_default(),
        }
    }

    /// Short label for use inside other provenance entries.
    pub fn label(&self) -> String {
        self.role.clone().unwrap_or_else(|| "tv".into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, Tensor>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strictness {
    Strict,
    AllowMissing,
}

fn checkpoint_label(ck: &Checkpoint) -> String {
    ck.metadata.get("name").cloned().unwrap_or_else(|| "<unnamed>".into())
}

fn ensure_finite(name: &str, data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(offset) => Err(Error::NonFinite {
            name: name.to_string(),
            offset,
        }),
        None => Ok(()),
    }
}

fn ensure_finite_lambda(lambda: f32) -> Result<()> {
    if lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("coefficient must be finite, got {lambda}")))
    }
}

/// Apply `f` elementwise over two key-aligned maps. Errors on any key or shape
/// difference, or on a non-finite result.
pub(crate) fn zip_with<F>(
    left: &BTreeMap<String, Tensor>,
    right: &BTreeMap<String, Tensor>,
    f: F,
) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(f32, f32) -> f32 + Sync,
{
    let report = compat_of(left, right);
    if !report.is_compatible() {
        return Err(Error::Incompatible(report.to_string()));
    }
    left.par_iter()
        .map(|(name, l)| {
            let r = &right[name];
            let data: Vec<f32> = l.data().iter().zip(r.data()).map(|(&a, &b)| f(a, b)).collect();
            ensure_finite(name, &data)?;
            Ok((name.clone(), l.with_data(data)))
        })
        .collect()
}

pub(crate) fn map_tensors<F>(src: &BTreeMap<String, Tensor>, f: F) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(f32) -> f32 + Sync,
{
    src.par_iter()
        .map(|(name, t)| {
            let data: Vec<f32> = t.data().iter().map(|&v| f(v)).collect();
            ensure_finite(name, &data)?;
            Ok((name.clone(), t.with_data(data)))
        })
        .collect()
}

impl TaskVector {
    pub fn new(deltas: BTreeMap<String, Tensor>, provenance: Provenance) -> Self {
        Self { deltas, provenance }
    }

    pub fn zeros_like(keyspace: &Checkpoint) -> Self {
        let deltas = keyspace
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self::new(deltas, Provenance::new(format!("zeros(like={})", checkpoint_label(keyspace))))
    }

    pub fn with_role(mut self, role: impl Into<String>) -> Self {
        self.provenance.role = Some(role.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.deltas.get(name)
    }

    pub fn numel(&self) -> usize {
        self.deltas.values().map(Tensor::numel).sum()
    }

    /// L2 norm accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.deltas
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Container form, tagged `kind=task_vector`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self.deltas.clone(),
            metadata: self.provenance.to_metadata(),
        }
    }

    /// Interpret a stored checkpoint as a task vector. Without `force`, the
    /// file must carry `kind=task_vector`.
    pub fn from_checkpoint(ck: Checkpoint, force: bool) -> Result<Self> {
        let kind = ck.metadata.get(KIND_KEY).map(String::as_str);
        if kind != Some(KIND_TASK_VECTOR) && !force {
            return Err(Error::InvalidArgument(format!(
                "checkpoint is not tagged {KIND_KEY}={KIND_TASK_VECTOR} (found {kind:?}); refusing to treat it as a delta"
            )));
        }
        ck.check_finite()?;
        let provenance = Provenance::from_metadata(&ck.metadata);
        Ok(Self::new(ck.tensors, provenance))
    }
}

/// Delta between a fine-tuned checkpoint and its pretrained base.
pub fn extract(fine_tuned: &Checkpoint, pretrained: &Checkpoint, strictness: Strictness) -> Result<TaskVector> {
    let mut missing = Vec::new();
    for (name, ft) in &fine_tuned.tensors {
        match pretrained.get(name) {
            None => {
                return Err(Error::Incompatible(format!(
                    "fine-tuned key `{name}` does not exist in the pretrained checkpoint"
                )))
            }
            Some(pt) if pt.shape() != ft.shape() => {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: ft.shape().to_vec(),
                    right: pt.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    for name in pretrained.tensors.keys() {
        if !fine_tuned.tensors.contains_key(name) {
            if strictness == Strictness::Strict {
                return Err(Error::MissingKey(name.clone()));
            }
            missing.push(name.clone());
        }
    }

    let deltas: BTreeMap<String, Tensor> = pretrained
        .tensors
        .par_iter()
        .map(|(name, pt)| {
            let delta = match fine_tuned.get(name) {
                Some(ft) => {
                    let data: Vec<f32> = ft.data().iter().zip(pt.data()).map(|(&f, &p)| f - p).collect();
                    ensure_finite(name, &data)?;
                    pt.with_data(data)
                }
                None => Tensor::zeros(pt.shape().to_vec()),
            };
            Ok((name.clone(), delta))
        })
        .collect::<Result<_>>()?;

    let mut provenance = Provenance::new(format!(
        "extract(ft={}, pt={})",
        checkpoint_label(fine_tuned),
        checkpoint_label(pretrained)
    ));
    provenance.missing = missing;
    Ok(TaskVector::new(deltas, provenance))
}

pub fn scale(tv: &TaskVector, lambda: f32) -> Result<TaskVector> {
    ensure_finite_lambda(lambda)?;
    let deltas = map_tensors(&tv.deltas, |v| lambda * v)?;
    Ok(TaskVector::new(deltas, tv.provenance.derived(format!("scale({lambda})"))))
}

pub fn add(a: &TaskVector, b: &TaskVector) -> Result<TaskVector> {
    let deltas = zip_with(&a.deltas, &b.deltas, |x, y| x + y)?;
    Ok(TaskVector::new(
        deltas,
        Provenance::new(format!("add({}, {})", a.provenance.label(), b.provenance.label())),
    ))
}

pub fn sub(a: &TaskVector, b: &TaskVector) -> Result<TaskVector> {
    let deltas = zip_with(&a.deltas, &b.deltas, |x, y| x - y)?;
    Ok(TaskVector::new(
        deltas,
        Provenance::new(format!("sub({}, {})", a.provenance.label(), b.provenance.label())),
    ))
}

/// `pretrained + tv`, with provenance appended to the pretrained metadata.
pub fn apply(pretrained: &Checkpoint, tv: &TaskVector) -> Result<Checkpoint> {
    let tensors = zip_with(&pretrained.tensors, &tv.deltas, |p, d| p + d)?;
    let mut metadata = pretrained.metadata.clone();
    metadata.remove(crate::task_vector::KIND_KEY);
    push_provenance(&mut metadata, format!("apply({})", tv.provenance.label()));
    Ok(Checkpoint { tensors, metadata })
}

/// One low-rank factor pair: `B` is `[d_out, rank]`, `A` is `[rank, d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub b: Tensor,
    pub a: Tensor,
}

impl LoraPair {
    pub fn new(b: Tensor, a: Tensor) -> Result<Self> {
        let pair = Self { b, a };
        pair.dims()?;
        Ok(pair)
    }

    /// `(d_out, rank, d_in)` after checking both factors are matrices with
    /// agreeing inner dimension.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let (bs, as_) = (self.b.shape(), self.a.shape());
        if bs.len() != 2 || as_.len() != 2 {
            return Err(Error::Lora(format!("factors must be matrices, got B{bs:?} A{as_:?}")));
        }
        if bs[1] != as_[0] {
            return Err(Error::Lora(format!(
                "inner dimensions disagree: B is {bs:?}, A is {as_:?}"
            )));
        }
        Ok((bs[0], bs[1], as_[1]))
    }

    /// `scale * B·A`, accumulated in f64 and rounded once.
    pub fn delta(&self, scale: f32) -> Result<Tensor> {
        let (rows, rank, cols) = self.dims()?;
        let (b, a) = (self.b.data(), self.a.data());
        let mut out = vec![0f32; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0f64;
                for r in 0..rank {
                    acc += b[i * rank + r] as f64 * a[r * cols + j] as f64;
                }
                out[i * cols + j] = (scale as f64 * acc) as f32;
            }
        }
        Tensor::new(vec![rows, cols], out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub targets: BTreeMap<String, LoraPair>,
    pub rank: usize,
    pub scale: f32,
}

impl LoraAdapter {
    pub fn new(targets: BTreeMap<String, LoraPair>, rank: usize, scale: f32) -> Result<Self> {
        let adapter = Self { targets, rank, scale };
        adapter.validate()?;
        Ok(adapter)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Lora("rank must be at least 1".into()));
        }
        if !self.scale.is_finite() {
            return Err(Error::Lora(format!("scale must be finite, got {}", self.scale)));
        }
        for (name, pair) in &self.targets {
            let (_, rank, _) = pair.dims().map_err(|e| Error::Lora(format!("target `{name}`: {e}")))?;
            if rank != self.rank {
                return Err(Error::Lora(format!(
                    "target `{name}` has rank {rank}, adapter declares {}",
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Read `<target>.lora_B` / `<target>.lora_A` pairs. `rank` and `scale`
    /// come from metadata when present; rank otherwise follows the factors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut bs = BTreeMap::new();
        let mut as_ = BTreeMap::new();
        for (name, t) in &ck.tensors {
            if let Some(target) = name.strip_suffix(LORA_B_SUFFIX) {
                bs.insert(target.to_string(), t.clone());
            } else if let Some(target) = name.strip_suffix(LORA_A_SUFFIX) {
                as_.insert(target.to_string(), t.clone());
            } else {
                return Err(Error::Lora(format!(
                    "tensor `{name}` is neither a {LORA_B_SUFFIX} nor a {LORA_A_SUFFIX} factor"
                )));
            }
        }
        let mut targets = BTreeMap::new();
        for (target, b) in bs {
            let a = as_
                .remove(&target)
                .ok_or_else(|| Error::Lora(format!("target `{target}` has B but no A factor")))?;
            targets.insert(target, LoraPair { b, a });
        }
        if let Some(target) = as_.keys().next() {
            return Err(Error::Lora(format!("target `{target}` has A but no B factor")));
        }
        let rank = match ck.metadata.get("rank") {
            Some(r) => r
                .parse()
                .map_err(|_| Error::Lora(format!("metadata rank `{r}` is not an integer")))?,
            None => match targets.values().next() {
                Some(pair) => pair.dims()?.1,
                None => return Err(Error::Lora("adapter has no targets and no rank metadata".into())),
            },
        };
        let scale = match ck.metadata.get("scale") {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Lora(format!("metadata scale `{s}` is not a number")))?,
            None => 1.0,
        };
        Self::new(targets, rank, scale)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (target, pair) in &self.targets {
            ck.insert(format!("{target}{LORA_B_SUFFIX}"), pair.b.clone());
            ck.insert(format!("{target}{LORA_A_SUFFIX}"), pair.a.clone());
        }
        ck.metadata.insert("rank".into(), self.rank.to_string());
        ck.metadata.insert("scale".into(), self.scale.to_string());
        ck
    }

    /// Dense `scale·B·A` per target, checked against the keyspace.
    pub(crate) fn target_deltas(&self, keyspace: &Checkpoint) -> Result<BTreeMap<String, Tensor>> {
        self.validate()?;
        self.targets
            .par_iter()
            .map(|(name, pair)| {
                let base = keyspace
                    .get(name)
                    .ok_or_else(|| Error::Lora(format!("unknown target `{name}`")))?;
                let delta = pair.delta(self.scale)?;
                if delta.shape() != base.shape() {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        left: delta.shape().to_vec(),
                        right: base.shape().to_vec(),
                    });
                }
                ensure_finite(name, delta.data())?;
                Ok((name.clone(), delta))
            })
            .collect()
    }
}

/// Dense task vector for an adapter: `scale·B·A` on targets, zeros elsewhere.
pub fn materialize_lora(adapter: &LoraAdapter, pretrained_keyspace: &Checkpoint) -> Result<TaskVector> {
    let mut deltas = adapter.target_deltas(pretrained_keyspace)?;
    for (name, t) in &pretrained_keyspace.tensors {
        deltas
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
    }
    let targets: Vec<&str> = adapter.targets.keys().map(String::as_str).collect();
    Ok(TaskVector::new(
        deltas,
        Provenance::new(format!(
            "materialize_lora(rank={}, scale={}, targets=[{}])",
            adapter.rank,
            adapter.scale,
            targets.join(",")
        )),
    ))
}
