//! Utterance records, normalization, splits and on-disk corpus layout.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticRegistry;
use crate::error::{Error, Result};
use crate::io::{read_array, write_array};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    /// `[n_mels, frames]`
    pub mel: ArrayD<f64>,
    pub speaker: usize,
    pub content: usize,
    pub split: Split,
}

impl UtteranceRecord {
    pub fn validate(&self, n_mels: usize) -> Result<()> {
        if self.mel.ndim() != 2 || self.mel.shape()[0] != n_mels {
            return Err(Error::Shape {
                expected: vec![n_mels, 0],
                actual: self.mel.shape().to_vec(),
            });
        }
        if self.mel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("utterance mel".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.mel.shape()[1]
    }
}

/// Scalar min-max map of log-mel values onto [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: f64,
    pub max: f64,
}

impl Normalizer {
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a ArrayD<f64>>) -> Result<Self> {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in mels {
            for &v in m {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(Error::Corpus("cannot fit normalizer on constant or empty data".into()));
        }
        Ok(Self { min, max })
    }

    pub fn scale(&self) -> f64 {
        2.0 / (self.max - self.min)
    }

    pub fn apply(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let s = self.scale();
        x.mapv(|v| (v - self.min) * s - 1.0)
    }

    pub fn invert(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let s = self.scale();
        x.mapv(|v| (v + 1.0) / s + self.min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<UtteranceRecord>,
    pub normalizer: Option<Normalizer>,
}

impl Corpus {
    pub fn speakers(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.speaker).collect()
    }

    pub fn contents(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.content).collect()
    }

    pub fn n_mels(&self) -> Option<usize> {
        self.records.first().map(|r| r.mel.shape()[0])
    }
}

/// Unseen-to-unseen split: eval holds only held-out speakers x held-out
/// contents; train holds neither. Records mixing the two are dropped.
pub fn split_unseen(
    corpus: &Corpus,
    held_speakers: &[usize],
    held_contents: &[usize],
) -> Result<(Corpus, Corpus)> {
    if held_speakers.is_empty() || held_contents.is_empty() {
        return Err(Error::Corpus("held-out speaker and content sets must be nonempty".into()));
    }
    let speakers = corpus.speakers();
    let contents = corpus.contents();
    if let Some(s) = held_speakers.iter().find(|s| !speakers.contains(s)) {
        return Err(Error::Corpus(format!("held-out speaker {s} not in corpus")));
    }
    if let Some(c) = held_contents.iter().find(|c| !contents.contains(c)) {
        return Err(Error::Corpus(format!("held-out content {c} not in corpus")));
    }
    let hs: BTreeSet<_> = held_speakers.iter().copied().collect();
    let hc: BTreeSet<_> = held_contents.iter().copied().collect();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for r in &corpus.records {
        match (hs.contains(&r.speaker), hc.contains(&r.content)) {
            (true, true) => eval.push(UtteranceRecord {
                split: Split::Eval,
                ..r.clone()
            }),
            (false, false) => train.push(UtteranceRecord {
                split: Split::Train,
                ..r.clone()
            }),
            _ => {}
        }
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Corpus("split leaves an empty partition".into()));
    }
    Ok((
        Corpus {
            records: train,
            normalizer: corpus.normalizer,
        },
        Corpus {
            records: eval,
            normalizer: corpus.normalizer,
        },
    ))
}

/// Random contiguous crop to `frames` (whole utterance if shorter).
pub fn random_crop(mel: &ArrayD<f64>, frames: usize, rng: &mut SeededRng) -> ArrayD<f64> {
    let len = mel.shape()[1];
    if len <= frames {
        return mel.clone();
    }
    let start = rng.below(len - frames + 1);
    mel.slice(ndarray::s![.., start..start + frames]).to_owned().into_dyn()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub speaker: usize,
    pub content: usize,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    normalizer: Option<Normalizer>,
    registry: Option<SyntheticRegistry>,
}

/// Writes `manifest.jsonl`, `meta.json` and one array file per record.
pub fn save_corpus(dir: &Path, corpus: &Corpus, registry: Option<&SyntheticRegistry>) -> Result<()> {
    fs::create_dir_all(dir.join("mels"))?;
    let mut entries = Vec::with_capacity(corpus.records.len());
    for (i, r) in corpus.records.iter().enumerate() {
        let rel = format!("mels/{i:05}.arr");
        let mut f = BufWriter::new(fs::File::create(dir.join(&rel))?);
        write_array(&mut f, &r.mel)?;
        f.flush()?;
        entries.push(ManifestEntry {
            path: rel,
            speaker: r.speaker,
            content: r.content,
            split: r.split,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    let meta = CorpusMeta {
        normalizer: corpus.normalizer,
        registry: registry.cloned(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<(Corpus, Option<SyntheticRegistry>)> {
    let entries = read_manifest(&dir.join("manifest.jsonl"))?;
    let meta: CorpusMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let records = entries
        .into_iter()
        .map(|e| {
            let mut f = fs::File::open(dir.join(&e.path))?;
            Ok(UtteranceRecord {
                mel: read_array(&mut f)?,
                speaker: e.speaker,
                content: e.content,
                split: e.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Corpus {
            records,
            normalizer: meta.normalizer,
        },
        meta.registry,
    ))
}
