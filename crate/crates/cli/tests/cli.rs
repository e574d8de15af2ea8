use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tvmerge_core::{load_checkpoint, save_checkpoint, Checkpoint, Tensor};

fn tvmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvmerge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ck(tensors: &[(&str, &[usize], &[f32])]) -> Checkpoint {
    Checkpoint::from_tensors(
        tensors
            .iter()
            .map(|(n, s, d)| (n.to_string(), Tensor::new(s.to_vec(), d.to_vec()).unwrap())),
    )
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// A pretrained checkpoint and four fine-tunes of it.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let w = |d: &[f32]| ck(&[("a.weight", &[2, 2], d), ("b.bias", &[3], &[0.5, -1.0, 2.0])]);
        let pt = w(&[1.0, 2.0, 3.0, 4.0]);
        save_checkpoint(&pt, dir.path().join("pt.st")).unwrap();
        for (name, d) in [
            ("ft1.st", [1.5, 2.0, 2.0, 4.25]),
            ("ft2.st", [0.0, 2.5, 3.0, 5.0]),
            ("ft3.st", [1.0, 1.0, 3.5, 4.0]),
            ("ft4.st", [2.0, 2.0, 3.0, 3.0]),
        ] {
            save_checkpoint(&w(&d), dir.path().join(name)).unwrap();
        }
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn extract(&self, ft: &str, out: &str) {
        let o = tvmerge(&["-q", "extract", "--ft", &self.p(ft), "--pt", &self.p("pt.st"), "--out", &self.p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
}

fn tensors(path: &Path) -> Vec<(String, Vec<f32>)> {
    load_checkpoint(path, false)
        .unwrap()
        .tensors
        .into_iter()
        .map(|(n, t)| (n, t.into_data()))
        .collect()
}

#[test]
fn extract_writes_tagged_difference() {
    let f = Fixture::new();
    f.extract("ft1.st", "tv1.st");
    let tv = load_checkpoint(f.path("tv1.st"), false).unwrap();
    assert_eq!(tv.metadata.get("kind").map(String::as_str), Some("task_vector"));
    assert_eq!(tv.get("a.weight").unwrap().data(), &[0.5, 0.0, -1.0, 0.25]);
    assert_eq!(tv.get("b.bias").unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn synthesize_with_unit_coefficients_equals_analogy() {
    let f = Fixture::new();
    for (ft, tv) in [("ft1.st", "a.st"), ("ft2.st", "b.st"), ("ft3.st", "c.st")] {
        f.extract(ft, tv);
    }
    let syn = tvmerge(&[
        "-q", "synthesize", "--st-pivot", &f.p("a.st"), "--mt-target", &f.p("b.st"), "--mt-pivot", &f.p("c.st"),
        "--lambda-st", "1", "--lambda-mt", "1", "--out", &f.p("syn.st"),
    ]);
    assert!(syn.status.success(), "{}", stderr(&syn));
    let ana = tvmerge(&[
        "-q", "analogy", "--tv3", &f.p("a.st"), "--tv2", &f.p("b.st"), "--tv1", &f.p("c.st"), "--out", &f.p("ana.st"),
    ]);
    assert!(ana.status.success(), "{}", stderr(&ana));
    assert_eq!(tensors(&f.path("syn.st")), tensors(&f.path("ana.st")));
    // a + (b - c) by hand
    assert_eq!(tensors(&f.path("ana.st"))[0].1, vec![-0.5, 1.5, -1.5, 1.25]);
}

#[test]
fn merge_with_missing_operand_names_the_path() {
    let f = Fixture::new();
    f.extract("ft1.st", "tv1.st");
    fs::write(
        f.path("r.toml"),
        "method = \"linear\"\npretrained = \"pt.st\"\n\n[[terms]]\nvector = \"tv1.st\"\nlambda = 1.0\n\n[[terms]]\nvector = \"nowhere.st\"\nlambda = 1.0\n",
    )
    .unwrap();
    let o = tvmerge(&["merge", &f.p("r.toml"), "--out", &f.p("m.st")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.st"), "{}", stderr(&o));
    assert!(!f.path("m.st").exists());
}

#[test]
fn merge_refuses_untagged_vectors_without_force() {
    let f = Fixture::new();
    fs::write(
        f.path("r.toml"),
        "method = \"linear\"\npretrained = \"pt.st\"\n\n[[terms]]\nvector = \"ft1.st\"\nlambda = 1.0\n",
    )
    .unwrap();
    let o = tvmerge(&["-q", "merge", &f.p("r.toml"), "--out", &f.p("m.st")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("task_vector"), "{}", stderr(&o));
    let o = tvmerge(&["-q", "merge", &f.p("r.toml"), "--out", &f.p("m.st"), "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(tensors(&f.path("m.st"))[0].1, vec![2.5, 4.0, 5.0, 8.25]);
}

#[test]
fn merge_logs_version_and_recipe_hash() {
    let f = Fixture::new();
    f.extract("ft1.st", "tv1.st");
    fs::write(
        f.path("r.toml"),
        "method = \"linear\"\npretrained = \"pt.st\"\n\n[[terms]]\nvector = \"tv1.st\"\nlambda = 0.5\n",
    )
    .unwrap();
    let o = tvmerge(&["merge", &f.p("r.toml"), "--out", &f.p("m.st")]);
    assert!(o.status.success());
    let err = stderr(&o);
    assert!(err.contains(env!("CARGO_PKG_VERSION")), "{err}");
    assert!(err.contains("recipe sha256="), "{err}");
    let merged = load_checkpoint(f.path("m.st"), false).unwrap();
    assert!(merged.provenance().iter().any(|e| err.contains(e.as_str())));
}

#[test]
fn ties_and_merge_recipe_agree() {
    let f = Fixture::new();
    f.extract("ft1.st", "tv1.st");
    f.extract("ft2.st", "tv2.st");
    f.extract("ft4.st", "lc.st");
    let o = tvmerge(&[
        "-q", "ties", "--pt", &f.p("pt.st"), "--tv", &f.p("tv1.st"), "--tv", &f.p("tv2.st"), "--density", "0.5",
        "--lambda", "0.8", "--lc", &f.p("lc.st"), "--lambda-lc", "0.5", "--out", &f.p("cli.st"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(
        f.path("r.toml"),
        "method = \"ties\"\npretrained = \"pt.st\"\n\n[[terms]]\nvector = \"tv1.st\"\n\n[[terms]]\nvector = \"tv2.st\"\n\n\
         [lc]\nvector = \"lc.st\"\nlambda = 0.5\n\n[ties]\ndensity = 0.5\nlambda = 0.8\n",
    )
    .unwrap();
    let o = tvmerge(&["-q", "merge", &f.p("r.toml"), "--out", &f.p("recipe.st")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(tensors(&f.path("cli.st")), tensors(&f.path("recipe.st")));
}

#[test]
fn outputs_are_byte_identical_and_inputs_untouched() {
    let f = Fixture::new();
    f.extract("ft1.st", "tv1.st");
    f.extract("ft2.st", "tv2.st");
    let inputs = ["pt.st", "tv1.st", "tv2.st"];
    let before: Vec<Vec<u8>> = inputs.iter().map(|n| fs::read(f.path(n)).unwrap()).collect();
    let run = |out: &str, threads: &str| {
        let o = tvmerge(&[
            "-q", "--threads", threads, "ties", "--pt", &f.p("pt.st"), "--tv", &f.p("tv1.st"), "--tv", &f.p("tv2.st"),
            "--out", &f.p(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(f.path(out)).unwrap()
    };
    let first = run("o1.st", "1");
    assert_eq!(first, run("o2.st", "4"));
    assert_eq!(first, run("o1.st", "2"));
    let after: Vec<Vec<u8>> = inputs.iter().map(|n| fs::read(f.path(n)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn refuses_to_overwrite_an_input() {
    let f = Fixture::new();
    let before = fs::read(f.path("ft1.st")).unwrap();
    let o = tvmerge(&["extract", "--ft", &f.p("ft1.st"), "--pt", &f.p("pt.st"), "--out", &f.p("ft1.st")]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(before, fs::read(f.path("ft1.st")).unwrap());
}

#[test]
fn usage_errors_exit_one_with_usage() {
    for args in [&["extract", "--ft", "a", "--pt", "b", "--out", "c", "--bogus"][..], &["frobnicate"], &["merge"]] {
        let o = tvmerge(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert!(err.starts_with("error:"), "{err}");
        assert!(err.contains("Usage:"), "{err}");
    }
    assert_eq!(tvmerge(&["--help"]).status.code(), Some(0));
}

#[test]
fn inspect_reports_stored_dtype() {
    let f = Fixture::new();
    // one F16 tensor [1.0, -2.0] written by hand
    let header = br#"{"__metadata__":{"name":"half"},"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(&[0x00, 0x3c, 0x00, 0xc0]);
    fs::write(f.path("half.st"), &bytes).unwrap();
    let o = tvmerge(&["-q", "inspect", &f.p("half.st")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("h\tF16\t[2]"), "{text}");
    assert!(text.contains("# name = half"), "{text}");

    let o = tvmerge(&["-q", "inspect", &f.p("pt.st")]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().take(2).collect::<Vec<_>>(), ["a.weight\tF32\t[2,2]", "b.bias\tF32\t[3]"]);
}

#[test]
fn corrupt_checkpoint_is_a_user_error() {
    let f = Fixture::new();
    fs::write(f.path("bad.st"), b"\x10\x00\x00\x00\x00\x00\x00\x00{not json").unwrap();
    let o = tvmerge(&["inspect", &f.p("bad.st")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn demo_then_search_over_lc_coefficient() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("demo");
    let ds = d.to_string_lossy().into_owned();
    let o = tvmerge(&["-q", "demo", "--scenario", "expansion", "--seed", "0", "--out", &ds]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(d.join("report.jsonl")).unwrap();
    assert!(report.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    assert!(report.contains("\"row\":\"linear+lc\""));

    fs::write(
        d.join("t.toml"),
        "method = \"linear\"\npretrained = \"pretrained.safetensors\"\n\n\
         [[terms]]\nvector = \"tv-st-L1.safetensors\"\nlambda = 0.65\n\n\
         [[terms]]\nvector = \"tv-st-L2.safetensors\"\nlambda = 0.65\n\n\
         [lc]\nvector = \"tv-lc.safetensors\"\nlambda = ${lambda_lc}\n",
    )
    .unwrap();
    fs::write(d.join("g.toml"), "[[coefficient]]\nname = \"lambda_lc\"\n").unwrap();
    let search = |trace: &str, threads: &str| {
        let o = tvmerge(&[
            "-q", "--threads", threads, "search", "--template", &format!("{ds}/t.toml"), "--grid", &format!("{ds}/g.toml"),
            "--trace", &format!("{ds}/{trace}"),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (String::from_utf8(o.stdout).unwrap(), fs::read_to_string(d.join(trace)).unwrap())
    };
    let (best, trace) = search("a.jsonl", "1");
    assert_eq!((best.clone(), trace.clone()), search("b.jsonl", "4"));

    let records: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 12);
    let lambdas: Vec<f64> = records.iter().map(|r| r["assignment"]["lambda_lc"].as_f64().unwrap()).collect();
    let expected: Vec<f64> = (2..=13).map(|i| i as f64 / 10.0).collect();
    assert_eq!(lambdas, expected);
    let top = records.iter().map(|r| r["score"].as_f64().unwrap()).fold(f64::MIN, f64::max);
    let first = records.iter().find(|r| r["score"].as_f64() == Some(top)).unwrap();
    let best: serde_json::Value = serde_json::from_str(&best).unwrap();
    assert_eq!(best["best"], first["assignment"]);
}

#[test]
fn search_with_unfilled_placeholder_fails() {
    let f = Fixture::new();
    f.extract("ft1.st", "tv1.st");
    fs::write(
        f.path("t.toml"),
        "method = \"linear\"\npretrained = \"pt.st\"\n\n[[terms]]\nvector = \"tv1.st\"\nlambda = ${other}\n",
    )
    .unwrap();
    fs::write(f.path("g.toml"), "[[coefficient]]\nname = \"lam\"\nvalues = [1.0]\n").unwrap();
    let o = tvmerge(&[
        "-q", "search", "--template", &f.p("t.toml"), "--grid", &f.p("g.toml"), "--trace", &f.p("tr.jsonl"),
        "--metric", "command", "--command", "echo 1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("${other}"), "{}", stderr(&o));
}
