//! TIES-Merging: trim each task vector to its largest-magnitude entries,
//! elect a sign per parameter by total signed mass, then average only the
//! operands that agree with the elected sign.
//!
//! Arithmetic contract (relied on by the brute-force oracle tests): sign
//! election and the disjoint mean accumulate in f64 in operand order and the
//! mean is rounded to f32 once.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_store::{compat_of, Checkpoint, Tensor};
use crate::task_vector::{scale, zip_with, Provenance, TaskVector};

/// Default fraction of entries kept by trimming.
pub const DEFAULT_DENSITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrimScope {
    /// Top-k over all tensors pooled.
    #[default]
    Global,
    /// Top-k inside each tensor separately.
    PerTensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignVector {
    pub signs: BTreeMap<String, SignTensor>,
}

fn check_density(density: f64) -> Result<()> {
    if density > 0.0 && density <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("density must be in (0, 1], got {density}")))
    }
}

/// `ceil(density * n)`, treating products within 1e-9 of an integer as that
/// integer so that e.g. 0.7 * 10 keeps 7 rather than 8.
pub fn keep_count(density: f64, n: usize) -> usize {
    let x = density * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (n.max(1) as f64) { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Keep mask for the `k` largest magnitudes; ties at the threshold go to the
/// lowest flat index.
fn top_k_mask<'a, I>(values: I, n: usize, k: usize) -> Vec<bool>
where
    I: Iterator<Item = &'a f32> + Clone,
{
    if k >= n {
        return vec![true; n];
    }
    if k == 0 {
        return vec![false; n];
    }
    let mut mags: Vec<f32> = values.clone().map(|v| v.abs()).collect();
    let (_, threshold, _) = mags.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let threshold = *threshold;
    let above = values.clone().filter(|v| v.abs().total_cmp(&threshold).is_gt()).count();
    let mut equal_budget = k - above;
    values
        .map(|v| {
            let m = v.abs();
            match m.total_cmp(&threshold) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Equal if equal_budget > 0 => {
                    equal_budget -= 1;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

pub fn trim(tv: &TaskVector, density: f64, scope: TrimScope) -> Result<TaskVector> {
    check_density(density)?;
    let deltas: BTreeMap<String, Tensor> = match scope {
        TrimScope::Global => {
            let n = tv.numel();
            let k = keep_count(density, n);
            let mask = top_k_mask(tv.deltas.values().flat_map(|t| t.data().iter()), n, k);
            let mut offset = 0;
            tv.deltas
                .iter()
                .map(|(name, t)| {
                    let m = &mask[offset..offset + t.numel()];
                    offset += t.numel();
                    let data = t.data().iter().zip(m).map(|(&v, &keep)| if keep { v } else { 0.0 }).collect();
                    (name.clone(), t.with_data(data))
                })
                .collect()
        }
        TrimScope::PerTensor => tv
            .deltas
            .par_iter()
            .map(|(name, t)| {
                let k = keep_count(density, t.numel());
                let mask = top_k_mask(t.data().iter(), t.numel(), k);
                let data = t.data().iter().zip(&mask).map(|(&v, &keep)| if keep { v } else { 0.0 }).collect();
                (name.clone(), t.with_data(data))
            })
            .collect(),
    };
    let mut provenance = tv.provenance.clone();
    provenance.entries.push(format!("trim(density={density}, scope={scope:?})"));
    Ok(TaskVector::new(deltas, provenance))
}

fn check_operands(tvs: &[&TaskVector]) -> Result<()> {
    let first = tvs
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one task vector is required".into()))?;
    for tv in &tvs[1..] {
        let report = compat_of(&first.deltas, &tv.deltas);
        if !report.is_compatible() {
            return Err(Error::Incompatible(report.to_string()));
        }
    }
    Ok(())
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Per element, the sign of the summed values across operands.
pub fn elect_sign(tvs: &[&TaskVector]) -> Result<SignVector> {
    check_operands(tvs)?;
    let signs = tvs[0]
        .deltas
        .par_iter()
        .map(|(name, t)| {
            let data = (0..t.numel())
                .map(|i| sign_of(tvs.iter().map(|tv| tv.deltas[name].data()[i] as f64).sum()))
                .collect();
            (
                name.clone(),
                SignTensor {
                    shape: t.shape().to_vec(),
                    data,
                },
            )
        })
        .collect();
    Ok(SignVector { signs })
}

/// Per element, the mean of operand values whose sign matches the elected
/// sign; zero where the elected sign is zero or nothing agrees.
pub fn disjoint_merge(tvs: &[&TaskVector], signs: &SignVector) -> Result<TaskVector> {
    check_operands(tvs)?;
    let first = tvs[0];
    for (name, t) in &first.deltas {
        match signs.signs.get(name) {
            Some(s) if s.shape.as_slice() == t.shape() => {}
            Some(s) => {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: t.shape().to_vec(),
                    right: s.shape.clone(),
                })
            }
            None => return Err(Error::Incompatible(format!("sign vector lacks `{name}`"))),
        }
    }
    if signs.signs.len() != first.deltas.len() {
        return Err(Error::Incompatible("sign vector has extra keys".into()));
    }
    let deltas = first
        .deltas
        .par_iter()
        .map(|(name, t)| {
            let elected = &signs.signs[name].data;
            let data = (0..t.numel())
                .map(|i| {
                    let s = elected[i];
                    if s == 0 {
                        return 0.0;
                    }
                    let (mut sum, mut count) = (0f64, 0usize);
                    for tv in tvs {
                        let v = tv.deltas[name].data()[i] as f64;
                        if sign_of(v) == s {
                            sum += v;
                            count += 1;
                        }
                    }
                    if count == 0 {
                        0.0
                    } else {
                        (sum / count as f64) as f32
                    }
                })
                .collect();
            (name.clone(), t.with_data(data))
        })
        .collect();
    let labels: Vec<String> = tvs.iter().map(|t| t.provenance.label()).collect();
    Ok(TaskVector::new(
        deltas,
        Provenance::new(format!("disjoint_merge({})", labels.join(", "))),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiesOptions {
    pub density: f64,
    /// Shared coefficient applied after aggregation.
    pub lambda: f32,
    pub scope: TrimScope,
    /// Optional per-operand coefficients applied before trimming.
    pub per_vector_lambdas: Option<Vec<f32>>,
}

impl Default for TiesOptions {
    fn default() -> Self {
        Self {
            density: DEFAULT_DENSITY,
            lambda: 1.0,
            scope: TrimScope::Global,
            per_vector_lambdas: None,
        }
    }
}

/// Aggregated TIES delta, before the shared coefficient.
pub fn ties_delta(tvs: &[&TaskVector], opts: &TiesOptions) -> Result<TaskVector> {
    check_operands(tvs)?;
    let scaled: Vec<TaskVector> = match &opts.per_vector_lambdas {
        Some(ls) if ls.len() != tvs.len() => {
            return Err(Error::InvalidArgument(format!(
                "{} per-vector coefficients for {} task vectors",
                ls.len(),
                tvs.len()
            )))
        }
        Some(ls) => tvs.iter().zip(ls).map(|(tv, &l)| scale(tv, l)).collect::<Result<_>>()?,
        None => tvs.iter().map(|tv| (*tv).clone()).collect(),
    };
    let trimmed: Vec<TaskVector> = scaled
        .iter()
        .map(|tv| trim(tv, opts.density, opts.scope))
        .collect::<Result<_>>()?;
    let refs: Vec<&TaskVector> = trimmed.iter().collect();
    let signs = elect_sign(&refs)?;
    disjoint_merge(&refs, &signs)
}

/// `θ_pt + λ·TIES(τ_1..τ_n)`, then `+ λ_lc·τ_lc` if an LC term is given. The
/// LC vector is not trimmed and does not vote.
pub fn ties_merge(
    pretrained: &Checkpoint,
    tvs: &[&TaskVector],
    opts: &TiesOptions,
    lc: Option<(&TaskVector, f32)>,
) -> Result<Checkpoint> {
    if !opts.lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("coefficient must be finite, got {}", opts.lambda)));
    }
    let merged = ties_delta(tvs, opts)?;
    let lambda = opts.lambda;
    let delta = match lc {
        None => zip_with(&merged.deltas, &merged.deltas, |m, _| lambda * m)?,
        Some((lc_tv, lambda_lc)) => {
            if !lambda_lc.is_finite() {
                return Err(Error::InvalidArgument(format!("coefficient must be finite, got {lambda_lc}")));
            }
            zip_with(&merged.deltas, &lc_tv.deltas, |m, l| lambda * m + lambda_lc * l)?
        }
    };
    let tensors = zip_with(&pretrained.tensors, &delta, |p, d| p + d)?;
    let mut out = Checkpoint {
        tensors,
        metadata: pretrained.metadata.clone(),
    };
    let labels: Vec<String> = tvs.iter().map(|t| t.provenance.label()).collect();
    out.push_provenance(format!(
        "ties_merge({}; density={}, lambda={}, scope={:?})",
        labels.join(", "),
        opts.density,
        opts.lambda,
        opts.scope
    ));
    if let Some((lc_tv, lambda_lc)) = lc {
        out.push_provenance(format!("language_control({}*{})", lambda_lc, lc_tv.provenance.label()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_vector::apply;

    fn tv(vals: &[f32]) -> TaskVector {
        TaskVector::new(
            [("w".to_string(), Tensor::from_vec(vals.to_vec()))].into(),
            Provenance::new("fixture"),
        )
    }

    fn data(tv: &TaskVector) -> &[f32] {
        tv.get("w").unwrap().data()
    }

    #[test]
    fn trim_keeps_top_half() {
        let out = trim(&tv(&[0.1, -0.9, 0.5, 0.05]), 0.5, TrimScope::Global).unwrap();
        assert_eq!(data(&out), &[0.0, -0.9, 0.5, 0.0]);
    }

    #[test]
    fn trim_full_density_is_identity() {
        let t = tv(&[0.1, -0.9, 0.5, 0.05]);
        assert_eq!(trim(&t, 1.0, TrimScope::Global).unwrap().deltas, t.deltas);
    }

    #[test]
    fn trim_ties_keep_lower_index() {
        let out = trim(&tv(&[1.0, -1.0, 1.0, -1.0]), 0.5, TrimScope::Global).unwrap();
        assert_eq!(data(&out), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn trim_rejects_bad_density() {
        for d in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(trim(&tv(&[1.0]), d, TrimScope::Global).is_err());
        }
    }

    #[test]
    fn trim_global_pools_tensors_in_name_order() {
        let t = TaskVector::new(
            [
                ("b".to_string(), Tensor::from_vec(vec![2.0, 2.0])),
                ("a".to_string(), Tensor::from_vec(vec![0.5, 2.0])),
            ]
            .into(),
            Provenance::new("fixture"),
        );
        // flat order: a[0]=0.5, a[1]=2, b[0]=2, b[1]=2; keep 2 → a[1], b[0]
        let g = trim(&t, 0.5, TrimScope::Global).unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[0.0, 2.0]);
        assert_eq!(g.get("b").unwrap().data(), &[2.0, 0.0]);
        let p = trim(&t, 0.5, TrimScope::PerTensor).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[0.0, 2.0]);
        assert_eq!(p.get("b").unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(0.5, 4), 2);
        assert_eq!(keep_count(0.7, 10), 7);
        assert_eq!(keep_count(0.3, 10), 3);
        assert_eq!(keep_count(0.5, 5), 3);
        assert_eq!(keep_count(0.01, 5), 1);
        assert_eq!(keep_count(1.0, 0), 0);
    }

    #[test]
    fn election_by_mass() {
        let s = elect_sign(&[&tv(&[1.0, -2.0]), &tv(&[3.0, 1.0])]).unwrap();
        assert_eq!(s.signs["w"].data, vec![1, -1]);
        let z = elect_sign(&[&tv(&[1.0]), &tv(&[-1.0])]).unwrap();
        assert_eq!(z.signs["w"].data, vec![0]);
        let single = elect_sign(&[&tv(&[2.0, -0.5, 0.0])]).unwrap();
        assert_eq!(single.signs["w"].data, vec![1, -1, 0]);
        assert!(elect_sign(&[]).is_err());
    }

    #[test]
    fn disjoint_mean_hand_case() {
        let (a, b) = (tv(&[1.0, -2.0]), tv(&[3.0, 1.0]));
        let s = elect_sign(&[&a, &b]).unwrap();
        assert_eq!(data(&disjoint_merge(&[&a, &b], &s).unwrap()), &[2.0, -2.0]);
    }

    #[test]
    fn disjoint_equal_operands_and_zero_sign() {
        let v = tv(&[0.3, -0.7, 1.25]);
        let s = elect_sign(&[&v, &v, &v]).unwrap();
        assert_eq!(disjoint_merge(&[&v, &v, &v], &s).unwrap().deltas, v.deltas);

        let (a, b) = (tv(&[1.0]), tv(&[-1.0]));
        let s = elect_sign(&[&a, &b]).unwrap();
        assert_eq!(data(&disjoint_merge(&[&a, &b], &s).unwrap()), &[0.0]);
    }

    #[test]
    fn ties_reduces_to_apply() {
        let pt = Checkpoint::from_tensors([("w", Tensor::from_vec(vec![1.0, -1.0, 0.5]))]);
        let t = tv(&[0.25, 3.0, -0.125]);
        let opts = TiesOptions {
            density: 1.0,
            ..Default::default()
        };
        let out = ties_merge(&pt, &[&t], &opts, None).unwrap();
        assert_eq!(out.tensors, apply(&pt, &t).unwrap().tensors);
    }

    #[test]
    fn ties_two_vector_fixture() {
        let pt = Checkpoint::from_tensors([("w", Tensor::zeros(vec![2]))]);
        let opts = TiesOptions {
            density: 1.0,
            ..Default::default()
        };
        let out = ties_merge(&pt, &[&tv(&[1.0, -2.0]), &tv(&[3.0, 1.0])], &opts, None).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn ties_lc_is_added_untrimmed() {
        let pt = Checkpoint::from_tensors([("w", Tensor::zeros(vec![4]))]);
        let lc = tv(&[0.01, 0.02, 0.03, 0.04]);
        let opts = TiesOptions::default();
        let t = tv(&[4.0, 0.1, -3.0, 0.2]);
        let out = ties_merge(&pt, &[&t], &opts, Some((&lc, 1.0))).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[4.0 + 0.01f32, 0.02, -3.0 + 0.03f32, 0.04]);
        assert!(out.provenance().last().unwrap().starts_with("language_control("));
    }

    #[test]
    fn per_vector_lambdas_scale_before_trim() {
        let pt = Checkpoint::from_tensors([("w", Tensor::zeros(vec![2]))]);
        let opts = TiesOptions {
            density: 1.0,
            per_vector_lambdas: Some(vec![2.0, 0.5]),
            ..Default::default()
        };
        let out = ties_merge(&pt, &[&tv(&[1.0, 1.0]), &tv(&[4.0, -8.0])], &opts, None).unwrap();
        // scaled: [2,2], [2,-4]; signs [+, -]; means [2, -4]
        assert_eq!(out.get("w").unwrap().data(), &[2.0, -4.0]);
        let bad = TiesOptions {
            per_vector_lambdas: Some(vec![1.0]),
            ..Default::default()
        };
        assert!(ties_merge(&pt, &[&tv(&[1.0, 1.0]), &tv(&[1.0, 1.0])], &bad, None).is_err());
    }
}
