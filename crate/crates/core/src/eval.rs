//! Speaker similarity, the synthetic content oracle and ablation drivers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;

use ndarray::{ArrayD, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, SyntheticRegistry};
use crate::distill::{DistillTrainer, MetricsSink, StepRecord, Teacher, TrainConfig, TrainData, TrainMode};
use crate::error::{Error, Result};
use crate::inference::{convert_one_step, ConversionRequest, OneStepModel};
use crate::networks::{SpeakerEmbedder, SpeakerEmbedding};

/// Cosine similarity of the two utterances' unit-norm embeddings.
pub fn secs(a: &ArrayD<f64>, b: &ArrayD<f64>, embedder: &dyn SpeakerEmbedder) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("utterance"));
    }
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    Ok(embedding_cosine(&ea, &eb))
}

pub fn embedding_cosine(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> f64 {
    a.dot(b).clamp(-1.0, 1.0)
}

/// Mean absolute residual between the per-bin time-centred mel and the
/// registered trajectory of `content`. Centring removes any speaker
/// envelope, so a perfect conversion scores 0 for every target.
pub fn content_preservation_error(mel: &ArrayD<f64>, content: usize, registry: &SyntheticRegistry) -> Result<f64> {
    let traj = registry.trajectory(content)?;
    let mel = mel.view().into_dimensionality::<Ix2>().map_err(|_| Error::Shape {
        expected: traj.shape().to_vec(),
        actual: mel.shape().to_vec(),
    })?;
    if mel.shape() != traj.shape() {
        return Err(Error::Shape {
            expected: traj.shape().to_vec(),
            actual: mel.shape().to_vec(),
        });
    }
    let mean = mel.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
    let centred = &mel - &mean;
    Ok((&centred - traj).mapv(f64::abs).mean().unwrap())
}

/// Unrelated-content threshold: the 5th percentile of the error between
/// every ordered pair of distinct registered contents.
pub fn calibrate_content_margin(registry: &SyntheticRegistry) -> Result<f64> {
    let n = registry.trajectories.len();
    if n < 2 {
        return Err(Error::Corpus("margin calibration needs at least two contents".into()));
    }
    let mut errs = Vec::with_capacity(n * (n - 1));
    for (i, a) in registry.trajectories.iter().enumerate() {
        for j in (0..n).filter(|&j| j != i) {
            errs.push(content_preservation_error(&a.clone().into_dyn(), j, registry)?);
        }
    }
    errs.sort_by(|a, b| a.total_cmp(b));
    let k = ((errs.len() - 1) as f64 * 0.05).round() as usize;
    Ok(errs[k])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source_speaker: usize,
    pub target_speaker: usize,
    pub content: usize,
    pub secs_to_target: f64,
    pub secs_to_source: f64,
    pub content_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub secs_to_target: f64,
    pub secs_to_source: f64,
    pub content_preservation: Option<f64>,
    pub content_margin: Option<f64>,
    /// Share of pairs whose content error is under the margin.
    pub below_margin: Option<f64>,
    pub pairs: Vec<PairRecord>,
}

impl EvalSummary {
    pub fn from_pairs(pairs: Vec<PairRecord>, margin: Option<f64>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("evaluation pairs"));
        }
        let n = pairs.len() as f64;
        let errs: Option<Vec<f64>> = pairs.iter().map(|p| p.content_error).collect();
        Ok(Self {
            secs_to_target: pairs.iter().map(|p| p.secs_to_target).sum::<f64>() / n,
            secs_to_source: pairs.iter().map(|p| p.secs_to_source).sum::<f64>() / n,
            content_preservation: errs.as_ref().map(|e| e.iter().sum::<f64>() / n),
            below_margin: errs
                .as_ref()
                .zip(margin)
                .map(|(e, m)| e.iter().filter(|&&v| v < m).count() as f64 / n),
            content_margin: margin,
            pairs,
        })
    }

    pub fn pairs_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for p in &self.pairs {
            s.push_str(&serde_json::to_string(p)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Converts every evaluation utterance to every other evaluation speaker.
/// Target conditioning and SECS both use `embedder`; each speaker's
/// reference embedding is the normalized mean over its utterances.
pub fn evaluate_conversions(
    model: &OneStepModel,
    eval: &Corpus,
    embedder: &dyn SpeakerEmbedder,
    registry: Option<&SyntheticRegistry>,
    seed: u64,
) -> Result<EvalSummary> {
    let refs = reference_embeddings(eval, embedder)?;
    if refs.len() < 2 {
        return Err(Error::Corpus("conversion evaluation needs two or more speakers".into()));
    }
    let mut records: Vec<_> = eval.records.iter().collect();
    records.sort_by_key(|r| (r.speaker, r.content));
    let mut pairs = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for (&tgt, emb) in refs.iter().filter(|(&s, _)| s != r.speaker) {
            let req = ConversionRequest {
                source: r.mel.clone(),
                target: emb.clone(),
                t_prime: model.t_prime,
                seed: seed.wrapping_add((i * refs.len() + tgt) as u64),
            };
            let out = convert_one_step(model, &req)?;
            let e = embedder.embed(&out)?;
            pairs.push(PairRecord {
                source_speaker: r.speaker,
                target_speaker: tgt,
                content: r.content,
                secs_to_target: embedding_cosine(&e, emb),
                secs_to_source: embedding_cosine(&e, &refs[&r.speaker]),
                content_error: registry
                    .map(|reg| content_preservation_error(&out, r.content, reg))
                    .transpose()?,
            });
        }
    }
    let margin = registry.map(calibrate_content_margin).transpose()?;
    EvalSummary::from_pairs(pairs, margin)
}

pub fn reference_embeddings(corpus: &Corpus, embedder: &dyn SpeakerEmbedder) -> Result<BTreeMap<usize, SpeakerEmbedding>> {
    crate::distill::speaker_table(corpus, embedder)
}

/// External per-WAV metric: runs `program args.. <wav>` and parses the
/// last non-empty stdout line as a number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalJudge {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalJudge {
    /// Shell-style command line (quotes group words).
    pub fn parse(command: &str) -> Result<Self> {
        let words = shell_words::split(command).map_err(|e| Error::Config(format!("judge command: {e}")))?;
        let mut parts = words.into_iter();
        let program = parts.next().ok_or_else(|| Error::Config("empty judge command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }

    pub fn score(&self, wav: &Path) -> Result<f64> {
        let out = Command::new(&self.program).args(&self.args).arg(wav).output()?;
        if !out.status.success() {
            return Err(Error::Config(format!("judge {} exited with {}", self.program, out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let last = text.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        last.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Config(format!("judge printed {last:?}, expected a number")))
    }
}

/// Rows of the component and distillation-method comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AblationMode {
    /// Reconstruction distillation with a trainable content encoder.
    FastvoicegradContent,
    /// + conversion distillation.
    Conversion,
    /// + reconversion.
    Reconversion,
    /// + inverse distillation (full conversion distillation).
    Inverse,
    /// Reconstruction distillation with content alignment, `layers` deep.
    Direct { layers: usize },
    /// Full conversion distillation with a `layers`-deep content encoder.
    Adcd { layers: usize },
}

impl AblationMode {
    pub fn label(&self) -> String {
        match self {
            AblationMode::FastvoicegradContent => "fastvoicegrad+content".into(),
            AblationMode::Conversion => "+conversion".into(),
            AblationMode::Reconversion => "+reconversion".into(),
            AblationMode::Inverse => "+inverse".into(),
            AblationMode::Direct { layers } => format!("direct({layers})"),
            AblationMode::Adcd { layers } => format!("adcd({layers})"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let layered = |prefix: &str| -> Option<usize> {
            s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?.parse().ok()
        };
        Ok(match s {
            "fastvoicegrad+content" => AblationMode::FastvoicegradContent,
            "+conversion" | "conversion" => AblationMode::Conversion,
            "+reconversion" | "reconversion" => AblationMode::Reconversion,
            "+inverse" | "inverse" => AblationMode::Inverse,
            _ => {
                if let Some(l) = layered("direct") {
                    AblationMode::Direct { layers: l }
                } else if let Some(l) = layered("adcd") {
                    AblationMode::Adcd { layers: l }
                } else {
                    return Err(Error::Config(format!("unknown ablation mode {s:?}")));
                }
            }
        })
    }

    /// Training configuration for this row, derived from `base`.
    pub fn configure(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.content_trainable = true;
        match *self {
            AblationMode::FastvoicegradContent => c.mode = TrainMode::Fastvoicegrad,
            AblationMode::Conversion => {
                c.mode = TrainMode::Adcd;
                c.reconversion = false;
                c.inverse = false;
            }
            AblationMode::Reconversion => {
                c.mode = TrainMode::Adcd;
                c.reconversion = true;
                c.inverse = false;
            }
            AblationMode::Inverse => {
                c.mode = TrainMode::Adcd;
                c.reconversion = true;
                c.inverse = true;
            }
            AblationMode::Direct { layers } => {
                c.mode = TrainMode::Direct;
                c.content_layers = layers;
            }
            AblationMode::Adcd { layers } => {
                c.mode = TrainMode::Adcd;
                c.reconversion = true;
                c.inverse = true;
                c.content_layers = layers;
            }
        }
        c
    }
}

/// Everything an ablation needs besides the list of modes.
pub struct AblationSetup<'a> {
    pub teacher: &'a Teacher,
    pub train: &'a TrainData,
    pub eval: &'a Corpus,
    pub registry: Option<&'a SyntheticRegistry>,
    pub embedder: &'a dyn SpeakerEmbedder,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub label: String,
    pub seeds: Vec<u64>,
    pub secs_to_target: f64,
    pub secs_to_source: f64,
    pub content_preservation: Option<f64>,
    pub per_seed: Vec<EvalSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>14} {:>14} {:>10}", "mode", "secs_to_target", "secs_to_source", "content");
        for r in &self.rows {
            let c = r.content_preservation.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:<24} {:>14.4} {:>14.4} {:>10}", r.label, r.secs_to_target, r.secs_to_source, c);
        }
        s
    }
}

struct Discard;

impl MetricsSink for Discard {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Trains one student per mode and seed from the shared teacher and
/// evaluates it on the held-out split.
pub fn run_ablation(modes: &[AblationMode], setup: &AblationSetup<'_>) -> Result<AblationTable> {
    run_ablation_with(modes, setup, &mut |_, _| Ok(Box::new(Discard)))
}

/// As [`run_ablation`], with a metrics sink per (mode, seed).
pub fn run_ablation_with(
    modes: &[AblationMode],
    setup: &AblationSetup<'_>,
    sinks: &mut dyn FnMut(AblationMode, u64) -> Result<Box<dyn MetricsSink>>,
) -> Result<AblationTable> {
    if modes.is_empty() || setup.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one mode and one seed".into()));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut per_seed = Vec::with_capacity(setup.seeds.len());
        for &seed in &setup.seeds {
            let mut cfg = mode.configure(&setup.base);
            cfg.seed = seed;
            let mut tr = DistillTrainer::new(&cfg, setup.teacher, setup.train.table.clone(), None)?;
            let mut sink = sinks(mode, seed)?;
            tr.run(setup.train, sink.as_mut())?;
            log::info!("ablation {} seed {seed} trained ({} steps)", mode.label(), tr.step);
            let model = OneStepModel::new(mode.label(), &cfg, tr.student, tr.table)?;
            per_seed.push(evaluate_conversions(&model, setup.eval, setup.embedder, setup.registry, seed)?);
        }
        let n = per_seed.len() as f64;
        let content: Option<Vec<f64>> = per_seed.iter().map(|s| s.content_preservation).collect();
        rows.push(AblationRow {
            mode,
            label: mode.label(),
            seeds: setup.seeds.clone(),
            secs_to_target: per_seed.iter().map(|s| s.secs_to_target).sum::<f64>() / n,
            secs_to_source: per_seed.iter().map(|s| s.secs_to_source).sum::<f64>() / n,
            content_preservation: content.map(|c| c.iter().sum::<f64>() / n),
            per_seed,
        });
    }
    Ok(AblationTable { rows })
}
