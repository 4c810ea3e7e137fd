//! Corpus directories: `corpus.jsonl`, `features.ckpt`, `vocab_a.txt`,
//! `vocab_b.txt` and the echoed `config.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ehat_core::corpus::{build_vocab, generate_corpus, split_dataset, RegionFeatureSpec, Sample, Scene};
use ehat_core::decoder::{Vocab, VocabPair};
use ehat_core::train::Example;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::format::{write_file, TensorFile};

pub const RECORDS: &str = "corpus.jsonl";
pub const FEATURES: &str = "features.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub index: u64,
    pub split: String,
    pub scene: String,
    pub caption_a: Vec<String>,
    pub caption_b: Vec<String>,
    /// `<file>#<tensor path>`
    pub features: String,
}

fn feature_key(index: u64) -> String {
    format!("scene.{index}")
}

pub fn feature_spec(cfg: &RunConfig) -> RegionFeatureSpec {
    let mut spec = RegionFeatureSpec::new(cfg.decoder.d_model, cfg.corpus.feature_table_seed);
    spec.noise = cfg.corpus.feature_noise;
    spec
}

/// Generate and write a corpus; `dir` must be empty or absent unless `force`.
pub fn write_corpus(cfg: &RunConfig, dir: &Path, force: bool) -> Result<usize> {
    if !force && dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("{} is not empty (pass --force to replace it)", dir.display());
    }
    let c = &cfg.corpus;
    let split = split_dataset(c.scenes, c.split, c.split_seed)?;
    let samples = generate_corpus(c.seed, c.scenes, &feature_spec(cfg))?;
    let ca: Vec<_> = samples.iter().map(|s| s.caption_a.clone()).collect();
    let cb: Vec<_> = samples.iter().map(|s| s.caption_b.clone()).collect();
    let vocab = build_vocab(&ca, &cb, c.min_freq_a, c.min_freq_b)?;

    let mut label = vec![""; c.scenes];
    for (name, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for &i in ids {
            label[i] = name;
        }
    }
    let mut lines = String::new();
    let mut tensors = Vec::with_capacity(samples.len());
    for s in &samples {
        let rec = Record {
            index: s.index,
            split: label[s.index as usize].to_string(),
            scene: s.scene.describe(),
            caption_a: s.caption_a.clone(),
            caption_b: s.caption_b.clone(),
            features: format!("{FEATURES}#{}", feature_key(s.index)),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
        tensors.push((feature_key(s.index), s.features.clone()));
    }
    write_file(&dir.join(RECORDS), lines.as_bytes(), force)?;
    TensorFile {
        header: String::new(),
        tensors,
    }
    .write(&dir.join(FEATURES), force)?;
    write_file(&dir.join("vocab_a.txt"), vocab_text(&vocab.a).as_bytes(), force)?;
    write_file(&dir.join("vocab_b.txt"), vocab_text(&vocab.b).as_bytes(), force)?;
    write_file(&dir.join("config.txt"), cfg.to_text().as_bytes(), force)?;
    Ok(samples.len())
}

/// Corpus words, one per line, without the reserved tokens.
fn vocab_text(v: &Vocab) -> String {
    v.words().iter().map(|w| format!("{w}\n")).collect()
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Vocab::new(text.lines().filter(|l| !l.is_empty()))?)
}

pub struct Corpus {
    pub records: Vec<Record>,
    pub vocab: VocabPair,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RECORDS);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let records = text
            .lines()
            .enumerate()
            .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), n + 1)))
            .collect::<Result<Vec<Record>>>()?;
        ensure!(!records.is_empty(), "{} has no records", path.display());

        let mut files: BTreeMap<String, BTreeMap<String, ehat_core::Tensor>> = BTreeMap::new();
        let vocab = VocabPair {
            a: read_vocab(&dir.join("vocab_a.txt"))?,
            b: read_vocab(&dir.join("vocab_b.txt"))?,
        };
        let mut examples = Vec::with_capacity(records.len());
        for r in &records {
            let Some((file, key)) = r.features.split_once('#') else {
                bail!("record {}: feature reference `{}` has no `#`", r.index, r.features);
            };
            if !files.contains_key(file) {
                let tf = TensorFile::read(&dir.join(file))?;
                files.insert(file.to_string(), tf.tensors.into_iter().collect());
            }
            let features = files[file]
                .get(key)
                .with_context(|| format!("record {}: `{key}` missing from {file}", r.index))?
                .clone();
            let scene = Scene::parse(&r.scene).with_context(|| format!("record {}", r.index))?;
            let sample = Sample {
                index: r.index,
                scene,
                caption_a: r.caption_a.clone(),
                caption_b: r.caption_b.clone(),
                features,
            };
            examples.push(Example::from_sample(&sample, &vocab));
        }
        Ok(Corpus {
            records,
            vocab,
            examples,
        })
    }

    pub fn split(&self, name: &str) -> Vec<Example> {
        self.records
            .iter()
            .zip(&self.examples)
            .filter(|(r, _)| r.split == name)
            .map(|(_, e)| e.clone())
            .collect()
    }

    pub fn feature_width(&self) -> usize {
        self.examples[0].features.cols()
    }
}
