use std::fs;
use std::path::Path;

use tvmerge_core::merge_engine::recipe::MergeRecipe;
use tvmerge_core::merge_engine::{linear_merge, merge_with_lc, synthesize_st};
use tvmerge_core::task_vector::{Provenance, KIND_KEY};
use tvmerge_core::ties::{ties_merge, TiesOptions, TrimScope};
use tvmerge_core::{save_checkpoint, Checkpoint, Error, LoraAdapter, LoraPair, TaskVector, Tensor};

fn vector(values: &[f32]) -> TaskVector {
    let deltas = [
        ("a".to_string(), Tensor::new(vec![2], values[..2].to_vec()).unwrap()),
        ("b".to_string(), Tensor::new(vec![2, 2], values[2..].to_vec()).unwrap()),
    ]
    .into();
    TaskVector::new(deltas, Provenance::new("fixture"))
}

fn base() -> Checkpoint {
    Checkpoint::from_tensors([
        ("a", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()),
        ("b", Tensor::new(vec![2, 2], vec![0.5, 0.25, -0.5, 2.0]).unwrap()),
    ])
}

struct Fixture {
    dir: tempfile::TempDir,
    tvs: Vec<TaskVector>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&base(), dir.path().join("base.safetensors")).unwrap();
    let tvs = vec![
        vector(&[1.0, 0.0, 2.0, -1.0, 0.5, 0.0]),
        vector(&[-0.5, 1.0, 1.0, 1.0, -2.0, 0.25]),
        vector(&[0.0, 0.5, -1.0, 0.0, 1.0, 1.0]),
    ];
    for (i, tv) in tvs.iter().enumerate() {
        save_checkpoint(&tv.to_checkpoint(), dir.path().join(format!("tv{i}.safetensors"))).unwrap();
    }
    Fixture { dir, tvs }
}

fn run(dir: &Path, text: &str, force: bool) -> tvmerge_core::Result<Checkpoint> {
    let path = dir.join("recipe.toml");
    fs::write(&path, text).unwrap();
    MergeRecipe::from_file(&path)?.execute(dir, force)
}

#[test]
fn linear_with_lc_matches_library_call() {
    let f = fixture();
    let out = run(
        f.dir.path(),
        r#"
method = "linear"
pretrained = "base.safetensors"
[[terms]]
vector = "tv0.safetensors"
lambda = 0.65
[[terms]]
vector = "tv1.safetensors"
lambda = 0.65
[lc]
vector = "tv2.safetensors"
lambda = 0.4
"#,
        false,
    )
    .unwrap();
    let expected = merge_with_lc(&base(), &[(&f.tvs[0], 0.65), (&f.tvs[1], 0.65)], &f.tvs[2], 0.4).unwrap();
    assert_eq!(out.tensors, expected.tensors);
    assert!(out.provenance().iter().any(|e| e.starts_with("recipe sha256=")));
}

#[test]
fn ties_and_analogy_recipes() {
    let f = fixture();
    let out = run(
        f.dir.path(),
        r#"
method = "ties"
pretrained = "base.safetensors"
[[terms]]
vector = "tv0.safetensors"
[[terms]]
vector = "tv1.safetensors"
[ties]
density = 0.5
lambda = 0.8
per_tensor = true
"#,
        false,
    )
    .unwrap();
    let opts = TiesOptions { density: 0.5, lambda: 0.8, scope: TrimScope::PerTensor, per_vector_lambdas: None };
    assert_eq!(out.tensors, ties_merge(&base(), &[&f.tvs[0], &f.tvs[1]], &opts, None).unwrap().tensors);

    let out = run(
        f.dir.path(),
        r#"
method = "analogy"
pretrained = "base.safetensors"
[[terms]]
vector = "tv0.safetensors"
lambda = 1.0
[[terms]]
vector = "tv1.safetensors"
lambda = 0.5
[[terms]]
vector = "tv2.safetensors"
lambda = 0.5
"#,
        false,
    )
    .unwrap();
    let synth = synthesize_st(&f.tvs[0], &f.tvs[1], &f.tvs[2], 1.0, 0.5).unwrap();
    assert_eq!(out.tensors, linear_merge(&base(), &[(&synth, 1.0)]).unwrap().tensors);
}

#[test]
fn untagged_vector_needs_force() {
    let f = fixture();
    let mut plain = f.tvs[0].to_checkpoint();
    plain.metadata.remove(KIND_KEY);
    save_checkpoint(&plain, f.dir.path().join("plain.safetensors")).unwrap();
    let text = r#"
method = "linear"
pretrained = "base.safetensors"
[[terms]]
vector = "plain.safetensors"
"#;
    let err = run(f.dir.path(), text, false).unwrap_err();
    assert!(err.to_string().contains("plain.safetensors"), "{err}");
    let forced = run(f.dir.path(), text, true).unwrap();
    assert_eq!(forced.tensors, linear_merge(&base(), &[(&f.tvs[0], 1.0)]).unwrap().tensors);
}

#[test]
fn adapter_terms_merge_in_low_rank_form() {
    let f = fixture();
    let pair = LoraPair::new(
        Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(),
        Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap(),
    )
    .unwrap();
    let adapter = LoraAdapter::new([("b".to_string(), pair)].into(), 1, 2.0).unwrap();
    save_checkpoint(&adapter.to_checkpoint(), f.dir.path().join("lora.safetensors")).unwrap();
    let out = run(
        f.dir.path(),
        r#"
method = "linear"
pretrained = "base.safetensors"
[[terms]]
adapter = "lora.safetensors"
lambda = 0.5
"#,
        false,
    )
    .unwrap();
    // 0.5 * 2 * [[0.5, -1], [1, -2]]
    assert_eq!(out.get("b").unwrap().data(), &[1.0, -0.75, 0.5, 0.0]);
    assert_eq!(out.get("a").unwrap(), base().get("a").unwrap());
}

#[test]
fn missing_operand_names_the_path() {
    let f = fixture();
    let err = run(
        f.dir.path(),
        r#"
method = "linear"
pretrained = "base.safetensors"
[[terms]]
vector = "nope.safetensors"
"#,
        false,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("nope.safetensors"), "{err}");
    assert!(err.is_user_error());
}
