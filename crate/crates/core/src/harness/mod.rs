//! Desk-scale synthetic harness for instructed translation.
//!
//! A tiny one-hidden-layer network reads an instruction channel (one slot per
//! language) and a one-hot source token, and has two heads: a language-token
//! head over `languages + 1` classes (the extra class is "none") and a
//! translation head over the vocabulary. Translation into language `L` is a
//! fixed permutation of the vocabulary. Models are stored as ordinary
//! [`Checkpoint`]s with fixed tensor names, so every merge operation in this
//! crate applies to them unchanged.
//!
//! Everything here is a pure function of its inputs: initialisation uses a
//! seeded ChaCha stream and training is full-batch gradient descent in f64
//! over examples in dataset order.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor_store::{Checkpoint, Tensor};

pub mod demo;

pub use demo::{run_demo, DemoConfig, ReportBundle, ReportRow, Scenario};

pub const HIDDEN_WEIGHT: &str = "hidden.weight";
pub const HIDDEN_BIAS: &str = "hidden.bias";
pub const LANG_WEIGHT: &str = "lang_head.weight";
pub const LANG_BIAS: &str = "lang_head.bias";
pub const TRANS_WEIGHT: &str = "trans_head.weight";
pub const TRANS_BIAS: &str = "trans_head.bias";

pub const DEFAULT_HIDDEN: usize = 32;

/// Task layout: vocabulary, languages and the per-language permutations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    pub num_languages: usize,
    pub seed: u64,
    /// Instruction-slot value for text-only (MT) inputs; speech (ST) inputs use 1.
    pub mt_instruction_value: f32,
    permutations: Vec<Vec<usize>>,
}

impl ToyTaskSpec {
    pub const DEFAULT_VOCAB: usize = 8;
    pub const DEFAULT_LANGUAGES: usize = 3;
    pub const DEFAULT_MT_VALUE: f32 = -1.0;

    pub fn new(vocab_size: usize, num_languages: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument("vocab_size must be at least 2".into()));
        }
        if num_languages == 0 || num_languages > vocab_size - 1 {
            return Err(Error::InvalidArgument(format!(
                "need 1..={} languages for vocab {vocab_size}, got {num_languages}",
                vocab_size - 1
            )));
        }
        // Language k translates by a non-trivial rotation whose offset is
        // drawn from the seed; distinct languages get distinct offsets.
        let span = (vocab_size - 1) as u64;
        let permutations = (0..num_languages)
            .map(|k| {
                let offset = 1 + ((seed + k as u64) % span) as usize;
                (0..vocab_size).map(|s| (s + offset) % vocab_size).collect()
            })
            .collect();
        Ok(Self {
            vocab_size,
            num_languages,
            seed,
            mt_instruction_value: Self::DEFAULT_MT_VALUE,
            permutations,
        })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(Self::DEFAULT_VOCAB, Self::DEFAULT_LANGUAGES, seed).expect("defaults are valid")
    }

    pub fn language_name(&self, lang: usize) -> String {
        format!("L{}", lang + 1)
    }

    pub fn language_index(&self, name: &str) -> Result<usize> {
        name.strip_prefix('L')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1 && n <= self.num_languages)
            .map(|n| n - 1)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown language `{name}`")))
    }

    pub fn permutation(&self, lang: usize) -> &[usize] {
        &self.permutations[lang]
    }

    pub fn input_dim(&self) -> usize {
        self.num_languages + self.vocab_size
    }

    /// Class index of the "none" language token.
    pub fn none_class(&self) -> usize {
        self.num_languages
    }

    fn check_lang(&self, lang: usize) -> Result<()> {
        if lang < self.num_languages {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "unknown language index {lang} (spec has {})",
                self.num_languages
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Instruction {
    None,
    Speech(usize),
    Text(usize),
}

impl Instruction {
    pub fn language(self) -> Option<usize> {
        match self {
            Instruction::None => None,
            Instruction::Speech(l) | Instruction::Text(l) => Some(l),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Example {
    pub instruction: Instruction,
    pub source: usize,
    /// Expected language-token class (`none_class` for no language).
    pub language_target: usize,
    pub translation_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToyTask {
    /// Copy the source with the "none" language token.
    Transcribe,
    /// Speech-instructed translation into one language.
    Translate(usize),
    /// Language token only, instruction drawn round-robin over the languages.
    LanguageControl(Vec<usize>),
    /// Text-instructed translation into one language.
    MachineTranslate(usize),
}

pub type Dataset = Vec<Example>;

pub fn make_data(spec: &ToyTaskSpec, task: &ToyTask) -> Result<Dataset> {
    let v = spec.vocab_size;
    match task {
        ToyTask::Transcribe => Ok((0..v)
            .map(|s| Example {
                instruction: Instruction::None,
                source: s,
                language_target: spec.none_class(),
                translation_target: Some(s),
            })
            .collect()),
        ToyTask::Translate(l) | ToyTask::MachineTranslate(l) => {
            spec.check_lang(*l)?;
            let instruction = match task {
                ToyTask::Translate(_) => Instruction::Speech(*l),
                _ => Instruction::Text(*l),
            };
            Ok((0..v)
                .map(|s| Example {
                    instruction,
                    source: s,
                    language_target: *l,
                    translation_target: Some(spec.permutation(*l)[s]),
                })
                .collect())
        }
        ToyTask::LanguageControl(langs) => {
            if langs.is_empty() {
                return Err(Error::InvalidArgument("language control needs at least one language".into()));
            }
            for &l in langs {
                spec.check_lang(l)?;
            }
            let n = langs.len();
            Ok((0..v * n)
                .map(|i| {
                    let l = langs[i % n];
                    Example {
                        instruction: Instruction::Speech(l),
                        source: i / n,
                        language_target: l,
                        translation_target: None,
                    }
                })
                .collect())
        }
    }
}

fn encode_input(spec: &ToyTaskSpec, ex: &Example) -> Vec<f64> {
    let mut x = vec![0.0; spec.input_dim()];
    match ex.instruction {
        Instruction::None => {}
        Instruction::Speech(l) => x[l] = 1.0,
        Instruction::Text(l) => x[l] = spec.mt_instruction_value as f64,
    }
    x[spec.num_languages + ex.source] = 1.0;
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Head {
    Language,
    Translation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dims {
    input: usize,
    hidden: usize,
    classes: usize,
    vocab: usize,
}

impl Dims {
    fn of(spec: &ToyTaskSpec, hidden: usize) -> Self {
        Self {
            input: spec.input_dim(),
            hidden,
            classes: spec.num_languages + 1,
            vocab: spec.vocab_size,
        }
    }

    fn shapes(&self) -> [(&'static str, Vec<usize>); 6] {
        [
            (HIDDEN_WEIGHT, vec![self.hidden, self.input]),
            (HIDDEN_BIAS, vec![self.hidden]),
            (LANG_WEIGHT, vec![self.classes, self.hidden]),
            (LANG_BIAS, vec![self.classes]),
            (TRANS_WEIGHT, vec![self.vocab, self.hidden]),
            (TRANS_BIAS, vec![self.vocab]),
        ]
    }
}

/// Hidden width of a stored model, after checking every tensor against `spec`.
pub fn model_hidden(spec: &ToyTaskSpec, model: &Checkpoint) -> Result<usize> {
    let w = model
        .get(HIDDEN_WEIGHT)
        .ok_or_else(|| Error::MissingKey(HIDDEN_WEIGHT.into()))?;
    let hidden = w.shape().first().copied().unwrap_or(0);
    let dims = Dims::of(spec, hidden);
    for (name, shape) in dims.shapes() {
        let t = model.get(name).ok_or_else(|| Error::MissingKey(name.into()))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                left: t.shape().to_vec(),
                right: shape,
            });
        }
    }
    if model.tensors.len() != dims.shapes().len() {
        return Err(Error::Incompatible("model has unexpected extra tensors".into()));
    }
    Ok(hidden)
}

/// Seeded Xavier-uniform weights, zero biases and zero instruction columns.
pub fn init_model(spec: &ToyTaskSpec, hidden: usize, seed: u64) -> Checkpoint {
    let dims = Dims::of(spec, hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ck = Checkpoint::new();
    for (name, shape) in dims.shapes() {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = if shape.len() == 2 {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..numel).map(|_| rng.random_range(-bound..bound) as f32).collect()
        } else {
            vec![0.0; numel]
        };
        let mut data = data;
        if name == HIDDEN_WEIGHT {
            // instruction columns start unused; fine-tuning has to grow them
            let cols = shape[1];
            for (i, v) in data.iter_mut().enumerate() {
                if i % cols < spec.num_languages {
                    *v = 0.0;
                }
            }
        }
        ck.insert(name, Tensor::new(shape, data).expect("shape matches data"));
    }
    ck.metadata.insert("kind".into(), "toy_model".into());
    ck
}

struct Params {
    dims: Dims,
    w1: Vec<f64>,
    b1: Vec<f64>,
    wl: Vec<f64>,
    bl: Vec<f64>,
    wt: Vec<f64>,
    bt: Vec<f64>,
}

struct Forward {
    hidden: Vec<f64>,
    lang_logits: Vec<f64>,
    trans_logits: Vec<f64>,
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

impl Params {
    fn load(spec: &ToyTaskSpec, model: &Checkpoint) -> Result<Self> {
        let hidden = model_hidden(spec, model)?;
        let g = |n: &str| to_f64(&model.tensors[n]);
        Ok(Self {
            dims: Dims::of(spec, hidden),
            w1: g(HIDDEN_WEIGHT),
            b1: g(HIDDEN_BIAS),
            wl: g(LANG_WEIGHT),
            bl: g(LANG_BIAS),
            wt: g(TRANS_WEIGHT),
            bt: g(TRANS_BIAS),
        })
    }

    fn store(&self, template: &Checkpoint) -> Checkpoint {
        let mut out = template.clone();
        for (name, values) in [
            (HIDDEN_WEIGHT, &self.w1),
            (HIDDEN_BIAS, &self.b1),
            (LANG_WEIGHT, &self.wl),
            (LANG_BIAS, &self.bl),
            (TRANS_WEIGHT, &self.wt),
            (TRANS_BIAS, &self.bt),
        ] {
            let t = out.tensors.get_mut(name).expect("validated");
            for (dst, &v) in t.data_mut().iter_mut().zip(values.iter()) {
                *dst = v as f32;
            }
        }
        out
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let d = self.dims;
        let hidden: Vec<f64> = (0..d.hidden)
            .map(|j| {
                let row = &self.w1[j * d.input..(j + 1) * d.input];
                let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.b1[j];
                z.tanh()
            })
            .collect();
        let dense = |w: &[f64], b: &[f64], n: usize| -> Vec<f64> {
            (0..n)
                .map(|c| {
                    let row = &w[c * d.hidden..(c + 1) * d.hidden];
                    row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b[c]
                })
                .collect()
        };
        let lang_logits = dense(&self.wl, &self.bl, d.classes);
        let trans_logits = dense(&self.wt, &self.bt, d.vocab);
        Forward {
            hidden,
            lang_logits,
            trans_logits,
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// First index of the maximum.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub frozen_heads: BTreeSet<Head>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 500,
            frozen_heads: BTreeSet::new(),
        }
    }
}

/// Full-batch gradient descent on the mean over examples of the summed
/// cross-entropy of each example's active heads.
pub fn train(spec: &ToyTaskSpec, init: &Checkpoint, data: &[Example], cfg: &TrainConfig) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    let mut p = Params::load(spec, init)?;
    let d = p.dims;
    let inputs: Vec<Vec<f64>> = data.iter().map(|ex| encode_input(spec, ex)).collect();
    let train_lang = !cfg.frozen_heads.contains(&Head::Language);
    let train_trans = !cfg.frozen_heads.contains(&Head::Translation);
    let scale = 1.0 / data.len() as f64;
    for epoch in 0..cfg.epochs {
        let mut g_w1 = vec![0.0; p.w1.len()];
        let mut g_b1 = vec![0.0; p.b1.len()];
        let mut g_wl = vec![0.0; p.wl.len()];
        let mut g_bl = vec![0.0; p.bl.len()];
        let mut g_wt = vec![0.0; p.wt.len()];
        let mut g_bt = vec![0.0; p.bt.len()];
        let mut loss = 0.0;
        for (ex, x) in data.iter().zip(&inputs) {
            let f = p.forward(x);
            let mut d_hidden = vec![0.0; d.hidden];
            let mut head = |logits: &[f64], target: usize, w: &[f64], gw: &mut [f64], gb: &mut [f64]| {
                let probs = softmax(logits);
                loss += (log_sum_exp(logits) - logits[target]) * scale;
                for (c, &pc) in probs.iter().enumerate() {
                    let dz = (pc - if c == target { 1.0 } else { 0.0 }) * scale;
                    gb[c] += dz;
                    for j in 0..d.hidden {
                        gw[c * d.hidden + j] += dz * f.hidden[j];
                        d_hidden[j] += dz * w[c * d.hidden + j];
                    }
                }
            };
            head(&f.lang_logits, ex.language_target, &p.wl, &mut g_wl, &mut g_bl);
            if let Some(t) = ex.translation_target {
                head(&f.trans_logits, t, &p.wt, &mut g_wt, &mut g_bt);
            }
            for j in 0..d.hidden {
                let dz = d_hidden[j] * (1.0 - f.hidden[j] * f.hidden[j]);
                g_b1[j] += dz;
                for (i, &xi) in x.iter().enumerate() {
                    if xi != 0.0 {
                        g_w1[j * d.input + i] += dz * xi;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        let lr = cfg.learning_rate;
        let step = |w: &mut [f64], g: &[f64]| {
            for (w, g) in w.iter_mut().zip(g) {
                *w -= lr * g;
            }
        };
        step(&mut p.w1, &g_w1);
        step(&mut p.b1, &g_b1);
        if train_lang {
            step(&mut p.wl, &g_wl);
            step(&mut p.bl, &g_bl);
        }
        if train_trans {
            step(&mut p.wt, &g_wt);
            step(&mut p.bt, &g_bt);
        }
        if p.w1.iter().chain(&p.wl).chain(&p.wt).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
    }
    Ok(p.store(init))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LanguageStats {
    pub examples: usize,
    /// `None` when no example of this language has a translation target.
    pub translation_accuracy: Option<f64>,
    pub language_accuracy: f64,
    pub lce: f64,
    /// Both heads right (language token only, where there is no translation).
    pub exact_match: f64,
}

/// Evaluation of one model on one dataset.
///
/// `lce` counts examples whose predicted token is a language other than the
/// expected one; predicting "none" for a language-instructed example is an
/// error but not a confusion, so `lce + language_accuracy <= 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub translation_accuracy: Option<f64>,
    pub language_accuracy: f64,
    pub lce: f64,
    pub exact_match: f64,
    /// Keyed by instructed language name (`none` for uninstructed examples).
    pub per_language: BTreeMap<String, LanguageStats>,
}

impl EvalReport {
    pub fn language(&self, name: &str) -> Option<&LanguageStats> {
        self.per_language.get(name)
    }

    /// The dev metric used for tuning: a translation only counts when it
    /// also carries the right language token.
    pub fn dev_score(&self) -> f64 {
        self.exact_match
    }
}

#[derive(Default)]
struct Tally {
    n: usize,
    trans_n: usize,
    trans_ok: usize,
    lang_ok: usize,
    confused: usize,
    exact: usize,
}

impl Tally {
    fn stats(&self) -> LanguageStats {
        let n = self.n.max(1) as f64;
        LanguageStats {
            examples: self.n,
            translation_accuracy: (self.trans_n > 0).then(|| self.trans_ok as f64 / self.trans_n as f64),
            language_accuracy: self.lang_ok as f64 / n,
            lce: self.confused as f64 / n,
            exact_match: self.exact as f64 / n,
        }
    }
}

/// Predicted `(language class, translation token)` for one example.
pub fn predict(spec: &ToyTaskSpec, model: &Checkpoint, ex: &Example) -> Result<(usize, usize)> {
    let p = Params::load(spec, model)?;
    let f = p.forward(&encode_input(spec, ex));
    Ok((argmax(&f.lang_logits), argmax(&f.trans_logits)))
}

pub fn evaluate(spec: &ToyTaskSpec, model: &Checkpoint, data: &[Example]) -> Result<EvalReport> {
    let p = Params::load(spec, model)?;
    let none = spec.none_class();
    let mut total = Tally::default();
    let mut per: BTreeMap<String, Tally> = BTreeMap::new();
    for ex in data {
        let f = p.forward(&encode_input(spec, ex));
        let lang = argmax(&f.lang_logits);
        let key = match ex.instruction.language() {
            Some(l) => spec.language_name(l),
            None => "none".to_string(),
        };
        let bucket = per.entry(key).or_default();
        let lang_ok = lang == ex.language_target;
        let trans_ok = ex.translation_target.map(|t| argmax(&f.trans_logits) == t);
        for t in [&mut total, bucket] {
            t.n += 1;
            if lang_ok {
                t.lang_ok += 1;
            } else if lang != none {
                t.confused += 1;
            }
            if let Some(ok) = trans_ok {
                t.trans_n += 1;
                t.trans_ok += ok as usize;
            }
            t.exact += (lang_ok && trans_ok.unwrap_or(true)) as usize;
        }
    }
    let overall = total.stats();
    Ok(EvalReport {
        examples: overall.examples,
        translation_accuracy: overall.translation_accuracy,
        language_accuracy: overall.language_accuracy,
        lce: overall.lce,
        exact_match: overall.exact_match,
        per_language: per.into_iter().map(|(k, t)| (k, t.stats())).collect(),
    })
}
