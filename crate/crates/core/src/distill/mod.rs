//! Teacher training, reconstruction / conversion distillation and the
//! direct content-alignment baseline.

pub mod checkpoint;
pub mod conditioning;
pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Normalizer};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_discriminator, ddpm_loss, feature_matching, inverse_score_distillation_loss, l1_mean,
    lsgan_generator, score_distillation_loss, to_signal, total_generator_loss, GeneratorTerms,
    LossMode, LossReport,
};
use crate::networks::{
    ContentEncoder, ContentEncoding, Denoiser, Discriminator, EpsilonPredictor, MultiDiscriminator,
    SpeakerEmbedder, SpeakerEmbedding, Vocoder,
};
use crate::nn::{Padding, VarStore, WnConv1d};
use crate::optim::Adam;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use conditioning::{build_batch_conditioning, label_derangement, BatchConditioning, SpeakerTable};
pub use config::{TrainConfig, TrainMode, VocoderKind};

/// Mean embedding per speaker over all of its utterances.
pub fn speaker_table(corpus: &Corpus, embedder: &dyn SpeakerEmbedder) -> Result<SpeakerTable> {
    let mut sums: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for r in &corpus.records {
        let e = embedder.embed(&r.mel)?;
        let acc = sums.entry(r.speaker).or_insert_with(|| vec![0.0; e.dim()]);
        for (a, v) in acc.iter_mut().zip(e.as_slice()) {
            *a += v;
        }
    }
    sums.into_iter()
        .map(|(k, v)| Ok((k, SpeakerEmbedding::new(v)?)))
        .collect()
}

/// Training utterances plus the speaker lookup used for conditioning.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub mels: Vec<ndarray::ArrayD<f64>>,
    pub speakers: Vec<usize>,
    pub table: SpeakerTable,
    frames: usize,
}

impl TrainData {
    pub fn new(corpus: &Corpus, table: SpeakerTable, crop_frames: usize) -> Result<Self> {
        if corpus.records.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let n_mels = corpus.records[0].mel.shape()[0];
        for r in &corpus.records {
            r.validate(n_mels)?;
            if !table.contains_key(&r.speaker) {
                return Err(Error::Corpus(format!("speaker {} has no embedding", r.speaker)));
            }
        }
        let shortest = corpus.records.iter().map(|r| r.frames()).min().unwrap();
        Ok(Self {
            mels: corpus.records.iter().map(|r| r.mel.clone()).collect(),
            speakers: corpus.records.iter().map(|r| r.speaker).collect(),
            table,
            frames: crop_frames.min(shortest),
        })
    }

    pub fn len(&self) -> usize {
        self.mels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mels.is_empty()
    }

    pub fn n_mels(&self) -> usize {
        self.mels[0].shape()[0]
    }

    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        self.len().div_ceil(batch)
    }

    /// Random batch of crops in which no speaker fills more than half the
    /// rows (whenever the data has two or more speakers).
    pub fn sample_batch(&self, batch: usize, rng: &mut SeededRng) -> (Tensor, Vec<usize>) {
        let multi = self.table.len() >= 2 && self.speakers.iter().any(|&s| s != self.speakers[0]);
        let mut idx = Vec::with_capacity(batch);
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        while idx.len() < batch {
            let i = rng.below(self.len());
            let c = counts.entry(self.speakers[i]).or_default();
            if multi && 2 * (*c + 1) > batch {
                continue;
            }
            *c += 1;
            idx.push(i);
        }
        let crops: Vec<_> = idx
            .iter()
            .map(|&i| crate::data::random_crop(&self.mels[i], self.frames, rng))
            .collect();
        let views: Vec<_> = crops.iter().map(|c| c.view()).collect();
        let x = ndarray::stack(Axis(0), &views).expect("equal crop shapes");
        (Tensor::constant(x), idx.iter().map(|&i| self.speakers[i]).collect())
    }

    pub fn embeddings(&self, ids: &[usize]) -> Result<Tensor> {
        let embs = ids
            .iter()
            .map(|id| {
                self.table
                    .get(id)
                    .ok_or_else(|| Error::Conditioning(format!("no embedding for speaker {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpeakerEmbedding::batch(&embs))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    #[serde(flatten)]
    pub report: LossReport,
}

pub trait MetricsSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;
}

impl MetricsSink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// `metrics.jsonl` holds the deterministic loss stream; wall-clock seconds
/// go to a sibling `timing.jsonl` so that seed-fixed reruns produce
/// identical metrics files.
pub struct JsonlMetrics {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    start: Instant,
}

impl JsonlMetrics {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            timing: BufWriter::new(File::create(dir.join("timing.jsonl"))?),
            start: Instant::now(),
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

impl MetricsSink for JsonlMetrics {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, rec)?;
        self.metrics.write_all(b"\n")?;
        writeln!(
            self.timing,
            "{{\"step\":{},\"wall_clock_s\":{:.6}}}",
            rec.step,
            self.start.elapsed().as_secs_f64()
        )?;
        Ok(())
    }
}

impl Drop for JsonlMetrics {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

fn check_report(report: &LossReport, step: u64) -> Result<()> {
    if report.all_finite() && report.disc.is_none_or(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss at step {step}: {report:?}")))
    }
}

/// Multi-step teacher: denoiser plus frozen speaker-free content encoder.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub denoiser: Denoiser,
    pub content: ContentEncoder,
    pub schedule: NoiseSchedule,
}

impl Teacher {
    pub fn new(cfg: &TrainConfig, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            denoiser: Denoiser::new(&cfg.denoiser(), rng)?,
            content: ContentEncoder::new(&cfg.teacher_content(), rng)?,
            schedule: cfg.schedule().build()?,
        })
    }

    pub fn freeze(&mut self) {
        self.denoiser.vs.set_trainable(false);
        self.content.vs.set_trainable(false);
    }

    /// Frozen teacher from a teacher or distillation checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ck.header.config, &mut SeededRng::new(0))?;
        ck.load_store("teacher.denoiser", &mut t.denoiser.vs)?;
        ck.load_store("teacher.content", &mut t.content.vs)?;
        t.freeze();
        Ok(t)
    }
}

/// Mel decoder used only to pretrain the teacher content encoder.
#[derive(Clone, Debug)]
struct ContentDecoder {
    vs: VarStore,
    hidden: WnConv1d,
    out: WnConv1d,
}

impl ContentDecoder {
    fn new(cfg: &TrainConfig, rng: &mut SeededRng) -> Self {
        let mut vs = VarStore::new(true);
        let h = cfg.teacher_content_hidden;
        let hidden = WnConv1d::new(&mut vs, rng, "hidden", cfg.d_content, h, cfg.kernel, Padding::Replicate);
        let out = WnConv1d::new(&mut vs, rng, "out", h, cfg.n_mels, cfg.kernel, Padding::Replicate);
        Self { vs, hidden, out }
    }

    fn forward(&self, p: &Tensor) -> Tensor {
        let h = self.hidden.forward(&self.vs, p).leaky_relu(0.2);
        self.out.forward(&self.vs, &h)
    }
}

/// Teacher training: content-encoder autoencoder pretraining followed by
/// DDPM training of the denoiser.
pub struct TeacherTrainer {
    pub cfg: TrainConfig,
    pub teacher: Teacher,
    decoder: ContentDecoder,
    opt_den: Adam,
    opt_enc: Adam,
    opt_dec: Adam,
    pub rng: SeededRng,
    pub step: u64,
    pub normalizer: Option<Normalizer>,
    pub table: SpeakerTable,
}

impl TeacherTrainer {
    pub fn new(cfg: &TrainConfig, table: SpeakerTable, normalizer: Option<Normalizer>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let teacher = Teacher::new(cfg, &mut rng)?;
        let decoder = ContentDecoder::new(cfg, &mut rng);
        let adam = cfg.adam();
        Ok(Self {
            opt_den: Adam::new(adam, &teacher.denoiser.vs),
            opt_enc: Adam::new(adam, &teacher.content.vs),
            opt_dec: Adam::new(adam, &decoder.vs),
            cfg: cfg.clone(),
            teacher,
            decoder,
            rng,
            step: 0,
            normalizer,
            table,
        })
    }

    fn encoder_steps(&self, data: &TrainData) -> u64 {
        (self.cfg.encoder_epochs * data.steps_per_epoch(self.cfg.batch_size)) as u64
    }

    pub fn total_steps(&self, data: &TrainData) -> u64 {
        self.encoder_steps(data) + (self.cfg.epochs * data.steps_per_epoch(self.cfg.batch_size)) as u64
    }

    /// Autoencoder step: reconstruct the per-bin-centred mel from the
    /// encoder output.
    pub fn encoder_step(&mut self, data: &TrainData) -> Result<LossReport> {
        self.teacher.content.vs.set_trainable(true);
        let (x0, _) = data.sample_batch(self.cfg.batch_size, &mut self.rng);
        let target = x0.sub(&x0.mean_keepdim(2));
        let p = self.teacher.content.encode(&x0)?;
        let loss = l1_mean(&self.decoder.forward(&p), &target);
        let grads = loss.backward();
        self.opt_enc.step(&mut self.teacher.content.vs, &grads);
        self.opt_dec.step(&mut self.decoder.vs, &grads);
        let mut report = LossReport::default();
        report.terms.insert("autoencoder".into(), loss.item());
        report.total = loss.item();
        Ok(report)
    }

    pub fn ddpm_step(&mut self, data: &TrainData) -> Result<LossReport> {
        self.teacher.content.vs.set_trainable(false);
        let (x0, spk) = data.sample_batch(self.cfg.batch_size, &mut self.rng);
        let s = data.embeddings(&spk)?;
        let p = self.teacher.content.encode(&x0)?;
        let b = spk.len();
        let t: Vec<usize> = (0..b)
            .map(|_| self.rng.int_inclusive(1, self.cfg.diffusion_steps))
            .collect();
        let eps = Tensor::constant(self.rng.normal_array(x0.shape()));
        let loss = ddpm_loss(&self.teacher.denoiser, &self.teacher.schedule, &x0, &t, &eps, &s, &p)?;
        let grads = loss.backward();
        self.opt_den.step(&mut self.teacher.denoiser.vs, &grads);
        let mut report = LossReport::default();
        report.terms.insert("ddpm".into(), loss.item());
        report.total = loss.item();
        Ok(report)
    }

    /// Runs (or resumes) until all configured epochs are done.
    pub fn run(&mut self, data: &TrainData, sink: &mut dyn MetricsSink) -> Result<()> {
        let enc = self.encoder_steps(data);
        let total = self.total_steps(data);
        while self.step < total {
            let (phase, report) = if self.step < enc {
                ("autoencoder", self.encoder_step(data)?)
            } else {
                ("ddpm", self.ddpm_step(data)?)
            };
            check_report(&report, self.step)?;
            self.step += 1;
            sink.record(&StepRecord {
                step: self.step,
                phase: phase.into(),
                report,
            })?;
        }
        self.teacher.freeze();
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "teacher",
            &self.cfg,
            self.step,
            self.rng.state(),
            self.normalizer,
            self.table.clone(),
        );
        ck.push_store("teacher.denoiser", &self.teacher.denoiser.vs);
        ck.push_store("teacher.content", &self.teacher.content.vs);
        ck.push_store("decoder", &self.decoder.vs);
        ck.push_optimizer("opt.teacher.denoiser", &self.opt_den, &self.teacher.denoiser.vs);
        ck.push_optimizer("opt.teacher.content", &self.opt_enc, &self.teacher.content.vs);
        ck.push_optimizer("opt.decoder", &self.opt_dec, &self.decoder.vs);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "teacher" {
            return Err(Error::Checkpoint(format!("expected a teacher checkpoint, got {}", ck.header.kind)));
        }
        let mut tr = Self::new(&ck.header.config, ck.header.speakers.clone(), ck.header.normalizer)?;
        ck.load_store("teacher.denoiser", &mut tr.teacher.denoiser.vs)?;
        ck.load_store("teacher.content", &mut tr.teacher.content.vs)?;
        ck.load_store("decoder", &mut tr.decoder.vs)?;
        ck.load_optimizer("opt.teacher.denoiser", &mut tr.opt_den, &tr.teacher.denoiser.vs)?;
        ck.load_optimizer("opt.teacher.content", &mut tr.opt_enc, &tr.teacher.content.vs)?;
        ck.load_optimizer("opt.decoder", &mut tr.opt_dec, &tr.decoder.vs)?;
        tr.rng = SeededRng::from_state(&ck.header.rng);
        tr.step = ck.header.step;
        Ok(tr)
    }
}

/// One-step student: denoiser initialized from the teacher and a content
/// encoder (trainable, or the frozen teacher encoder).
#[derive(Clone, Debug)]
pub struct Student {
    pub denoiser: Denoiser,
    pub content: ContentEncoder,
    pub content_trainable: bool,
}

impl Student {
    fn uses_teacher_encoder(cfg: &TrainConfig) -> bool {
        cfg.mode == TrainMode::Fastvoicegrad && !cfg.content_trainable
    }

    pub fn from_teacher(cfg: &TrainConfig, teacher: &Teacher, rng: &mut SeededRng) -> Result<Self> {
        let mut denoiser = teacher.denoiser.clone();
        denoiser.vs = denoiser.vs.fork();
        denoiser.vs.set_trainable(true);
        let (content, trainable) = if Self::uses_teacher_encoder(cfg) {
            let mut c = teacher.content.clone();
            c.vs = c.vs.fork();
            c.vs.set_trainable(false);
            (c, false)
        } else {
            (ContentEncoder::new(&cfg.student_content(), rng)?, true)
        };
        Ok(Self {
            denoiser,
            content,
            content_trainable: trainable,
        })
    }

    /// Overwrites the content encoder with the teacher's weights; only
    /// possible when both share one architecture.
    pub fn copy_teacher_content(&mut self, teacher: &Teacher) -> Result<()> {
        if self.content.config() != teacher.content.config() {
            return Err(Error::Geometry("student and teacher content encoders differ in architecture".into()));
        }
        let trainable = self.content.vs.is_trainable();
        self.content.vs.copy_from(&teacher.content.vs)?;
        self.content.vs.set_trainable(trainable);
        Ok(())
    }

    /// Student skeleton with the geometry implied by `cfg`.
    pub fn skeleton(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = SeededRng::new(0);
        let denoiser = Denoiser::new(&cfg.denoiser(), &mut rng)?;
        let trainable = !Self::uses_teacher_encoder(cfg);
        let ccfg = if trainable { cfg.student_content() } else { cfg.teacher_content() };
        let mut content = ContentEncoder::new(&ccfg, &mut rng)?;
        content.vs.set_trainable(trainable);
        Ok(Self {
            denoiser,
            content,
            content_trainable: trainable,
        })
    }

    /// `mu_phi(x_{t'}, t', s, p_phi(x0))` for a batch, plus the content
    /// embedding that was used.
    pub fn convert(
        &self,
        x0: &Tensor,
        s: &Tensor,
        sched: &NoiseSchedule,
        t_prime: usize,
        eps: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let p = self.content.encode(x0)?;
        let tp = vec![t_prime; x0.shape()[0]];
        let x_t = sched.diffuse(x0, &tp, eps)?;
        let e = self.denoiser.predict_eps(&x_t, &tp, s, &p)?;
        Ok((sched.denoise_step(&x_t, &tp, &e)?, p))
    }
}

/// Distillation state for the fastvoicegrad, adcd and direct modes.
pub struct DistillTrainer {
    pub cfg: TrainConfig,
    pub teacher: Teacher,
    pub student: Student,
    pub disc: MultiDiscriminator,
    vocoder: Box<dyn Vocoder + Send + Sync>,
    opt_den: Adam,
    opt_cnt: Adam,
    opt_disc: Adam,
    pub rng: SeededRng,
    pub step: u64,
    pub normalizer: Option<Normalizer>,
    pub table: SpeakerTable,
}

impl DistillTrainer {
    pub fn new(
        cfg: &TrainConfig,
        teacher: &Teacher,
        table: SpeakerTable,
        normalizer: Option<Normalizer>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == TrainMode::Teacher {
            return Err(Error::Config("distillation needs mode fastvoicegrad, adcd or direct".into()));
        }
        if teacher.denoiser.config() != &cfg.denoiser() || teacher.schedule.spec() != cfg.schedule() {
            return Err(Error::Geometry(
                "distillation config does not match the teacher's denoiser or schedule".into(),
            ));
        }
        if teacher.content.config() != &cfg.teacher_content() {
            return Err(Error::Geometry(
                "distillation config does not match the teacher content encoder".into(),
            ));
        }
        let mut rng = SeededRng::new(cfg.seed);
        let mut teacher = teacher.clone();
        teacher.freeze();
        let student = Student::from_teacher(cfg, &teacher, &mut rng)?;
        let disc = MultiDiscriminator::new(&cfg.discriminator(), &mut rng)?;
        let adam = cfg.adam();
        Ok(Self {
            opt_den: Adam::new(adam, &student.denoiser.vs),
            opt_cnt: Adam::new(adam, &student.content.vs),
            opt_disc: Adam::new(adam, &disc.vs),
            vocoder: cfg.vocoder_config().build(),
            cfg: cfg.clone(),
            teacher,
            student,
            disc,
            rng,
            step: 0,
            normalizer,
            table,
        })
    }

    pub fn total_steps(&self, data: &TrainData) -> u64 {
        (self.cfg.epochs * data.steps_per_epoch(self.cfg.batch_size)) as u64
    }

    fn eps_like(&mut self, x: &Tensor) -> Tensor {
        Tensor::constant(self.rng.normal_array(x.shape()))
    }

    fn sample_t(&mut self, b: usize) -> Vec<usize> {
        (0..b)
            .map(|_| self.rng.int_inclusive(1, self.cfg.diffusion_steps))
            .collect()
    }

    fn signal(&self, mel: &Tensor) -> Result<crate::networks::Signal> {
        to_signal(mel, self.disc.domain(), Some(self.vocoder.as_ref()))
    }

    /// Adversarial and feature-matching terms for `x_gen` against `x0`,
    /// with discriminator parameters held constant.
    fn adversarial_terms(&mut self, x_gen: &Tensor, x0: &Tensor) -> Result<(Tensor, Tensor)> {
        self.disc.vs.set_trainable(false);
        let gen = self.disc.discriminate(&self.signal(x_gen)?)?;
        let real = self.disc.discriminate(&self.signal(x0)?)?;
        Ok((lsgan_generator(&gen), feature_matching(&gen, &real)?))
    }

    fn apply_generator(&mut self, total: &Tensor) {
        let grads = total.backward();
        self.opt_den.step(&mut self.student.denoiser.vs, &grads);
        if self.student.content_trainable {
            self.opt_cnt.step(&mut self.student.content.vs, &grads);
        }
    }

    fn discriminator_update(&mut self, x0: &Tensor, x_gen: &Tensor) -> Result<f64> {
        self.disc.vs.set_trainable(true);
        let real = self.signal(x0)?;
        let gen = self.signal(&x_gen.detach())?;
        let loss = adv_loss_discriminator(&self.disc, &real, &gen)?;
        let grads = loss.backward();
        self.opt_disc.step(&mut self.disc.vs, &grads);
        Ok(loss.item())
    }

    /// Conversion distillation step: generator update, then discriminator.
    pub fn adcd_step(&mut self, data: &TrainData) -> Result<LossReport> {
        let obj = self.adcd_objective(data)?;
        self.finish_step(obj)
    }

    fn finish_step(&mut self, obj: Objective) -> Result<LossReport> {
        let Objective { total, mut report, x0, x_gen } = obj;
        self.apply_generator(&total);
        report.disc = Some(self.discriminator_update(&x0, &x_gen)?);
        Ok(report)
    }

    fn adcd_objective(&mut self, data: &TrainData) -> Result<Objective> {
        let (x0, spk) = data.sample_batch(self.cfg.batch_size, &mut self.rng);
        let cond = build_batch_conditioning(&spk, &data.table, &mut self.rng, self.cfg.strict_conditioning)?;
        cond.check()?;
        let b = spk.len();
        let sched = self.teacher.schedule.clone();
        let p_src = self.teacher.content.encode(&x0)?;

        let eps = self.eps_like(&x0);
        let (x_cv, _) = self.student.convert(&x0, &cond.s_tgt, &sched, self.cfg.t_prime, &eps)?;
        let (adv, fm) = self.adversarial_terms(&x_cv, &x0)?;

        let t = self.sample_t(b);
        let eps_t = self.eps_like(&x0);
        let dist = score_distillation_loss(&x_cv, &cond.s_tgt, &p_src, &self.teacher.denoiser, &sched, &t, &eps_t)?;
        let inverse = self.cfg.inverse && !cond.degraded;
        let inv = if inverse {
            Some(inverse_score_distillation_loss(
                &x_cv, &cond.s_inv, &cond.s_tgt, &p_src, &self.teacher.denoiser, &sched, &t, &eps_t,
            )?)
        } else {
            None
        };

        let (mut dist_cv2, mut inv_cv2) = (None, None);
        if self.cfg.reconversion {
            let eps2 = self.eps_like(&x0);
            let (x_cv2, _) = self.student.convert(&x_cv, &cond.s_tgt2, &sched, self.cfg.t_prime, &eps2)?;
            let t2 = self.sample_t(b);
            let eps_t2 = self.eps_like(&x0);
            dist_cv2 = Some(score_distillation_loss(
                &x_cv2, &cond.s_tgt2, &p_src, &self.teacher.denoiser, &sched, &t2, &eps_t2,
            )?);
            if inverse {
                let inv_ids: Vec<usize> = cond
                    .tgt2
                    .iter()
                    .map(|&tg| {
                        let others: Vec<usize> = spk.iter().copied().filter(|&s| s != tg).collect();
                        others[self.rng.below(others.len())]
                    })
                    .collect();
                let s_inv2 = data.embeddings(&inv_ids)?;
                inv_cv2 = Some(inverse_score_distillation_loss(
                    &x_cv2, &s_inv2, &cond.s_tgt2, &p_src, &self.teacher.denoiser, &sched, &t2, &eps_t2,
                )?);
            }
        }

        let terms = GeneratorTerms {
            adv: Some(adv),
            fm: Some(fm),
            dist: Some(dist),
            dist_cv2,
            inv,
            inv_cv2,
            align: None,
        };
        let (total, report) = total_generator_loss(&terms, &self.cfg.weights(), LossMode::Adcd)?;
        Ok(Objective { total, report, x0, x_gen: x_cv })
    }

    fn reconstruction_objective(&mut self, data: &TrainData, align: bool) -> Result<Objective> {
        let (x0, spk) = data.sample_batch(self.cfg.batch_size, &mut self.rng);
        let s_src = data.embeddings(&spk)?;
        let b = spk.len();
        let sched = self.teacher.schedule.clone();
        let p_src = self.teacher.content.encode(&x0)?;

        let eps = self.eps_like(&x0);
        let (x_rec, p_phi) = self.student.convert(&x0, &s_src, &sched, self.cfg.t_prime, &eps)?;
        let (adv, fm) = self.adversarial_terms(&x_rec, &x0)?;
        let t = self.sample_t(b);
        let eps_t = self.eps_like(&x0);
        let dist = score_distillation_loss(&x_rec, &s_src, &p_src, &self.teacher.denoiser, &sched, &t, &eps_t)?;
        let terms = GeneratorTerms {
            adv: Some(adv),
            fm: Some(fm),
            dist: Some(dist),
            align: align.then(|| l1_mean(&p_phi, &p_src)),
            ..Default::default()
        };
        let (total, report) = total_generator_loss(&terms, &self.cfg.weights(), LossMode::FastVoiceGrad)?;
        Ok(Objective { total, report, x0, x_gen: x_rec })
    }

    fn objective(&mut self, data: &TrainData) -> Result<Objective> {
        match self.cfg.mode {
            TrainMode::Adcd => self.adcd_objective(data),
            TrainMode::Fastvoicegrad => self.reconstruction_objective(data, false),
            TrainMode::Direct => self.reconstruction_objective(data, true),
            TrainMode::Teacher => unreachable!("rejected in new"),
        }
    }

    /// Reconstruction distillation step.
    pub fn fastvoicegrad_step(&mut self, data: &TrainData) -> Result<LossReport> {
        let obj = self.reconstruction_objective(data, false)?;
        self.finish_step(obj)
    }

    /// Reconstruction distillation plus content alignment to the teacher
    /// encoder.
    pub fn direct_distillation_step(&mut self, data: &TrainData) -> Result<LossReport> {
        let obj = self.reconstruction_objective(data, true)?;
        self.finish_step(obj)
    }

    pub fn step_once(&mut self, data: &TrainData) -> Result<LossReport> {
        let obj = self.objective(data)?;
        let report = self.finish_step(obj)?;
        check_report(&report, self.step)?;
        self.step += 1;
        Ok(report)
    }

    pub fn run(&mut self, data: &TrainData, sink: &mut dyn MetricsSink) -> Result<()> {
        let total = self.total_steps(data);
        while self.step < total {
            let report = self.step_once(data)?;
            sink.record(&StepRecord {
                step: self.step,
                phase: self.cfg.mode.name().into(),
                report,
            })?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            self.cfg.mode.name(),
            &self.cfg,
            self.step,
            self.rng.state(),
            self.normalizer,
            self.table.clone(),
        );
        ck.push_store("teacher.denoiser", &self.teacher.denoiser.vs);
        ck.push_store("teacher.content", &self.teacher.content.vs);
        ck.push_store("student.denoiser", &self.student.denoiser.vs);
        ck.push_store("student.content", &self.student.content.vs);
        ck.push_store("disc", &self.disc.vs);
        ck.push_optimizer("opt.student.denoiser", &self.opt_den, &self.student.denoiser.vs);
        ck.push_optimizer("opt.student.content", &self.opt_cnt, &self.student.content.vs);
        ck.push_optimizer("opt.disc", &self.opt_disc, &self.disc.vs);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let teacher = Teacher::from_checkpoint(ck)?;
        let mut tr = Self::new(&ck.header.config, &teacher, ck.header.speakers.clone(), ck.header.normalizer)?;
        ck.load_store("student.denoiser", &mut tr.student.denoiser.vs)?;
        ck.load_store("student.content", &mut tr.student.content.vs)?;
        ck.load_store("disc", &mut tr.disc.vs)?;
        ck.load_optimizer("opt.student.denoiser", &mut tr.opt_den, &tr.student.denoiser.vs)?;
        ck.load_optimizer("opt.student.content", &mut tr.opt_cnt, &tr.student.content.vs)?;
        ck.load_optimizer("opt.disc", &mut tr.opt_disc, &tr.disc.vs)?;
        tr.rng = SeededRng::from_state(&ck.header.rng);
        tr.step = ck.header.step;
        Ok(tr)
    }

    /// Per-block gradient norms of the student parameters under the
    /// current generator objective on one batch. No parameter or RNG state
    /// changes.
    pub fn student_grad_norms(&mut self, data: &TrainData) -> Result<Vec<(String, f64)>> {
        let rng = self.rng.clone();
        let obj = self.objective(data);
        self.rng = rng;
        let grads = obj?.total.backward();
        let mut out: Vec<(String, f64)> = self
            .student
            .denoiser
            .vs
            .grad_norms(&grads)
            .into_iter()
            .map(|(n, g)| (format!("denoiser.{n}"), g))
            .collect();
        out.extend(
            self.student
                .content
                .vs
                .grad_norms(&grads)
                .into_iter()
                .map(|(n, g)| (format!("content.{n}"), g)),
        );
        Ok(out)
    }
}

struct Objective {
    total: Tensor,
    report: LossReport,
    x0: Tensor,
    x_gen: Tensor,
}

/// Array helper: `[b, d]` tensor of repeated embedding rows.
pub fn repeat_embedding(e: &SpeakerEmbedding, b: usize) -> Tensor {
    let d = e.dim();
    let data: Vec<f64> = (0..b).flat_map(|_| e.as_slice().iter().copied()).collect();
    Tensor::constant(ndarray::ArrayD::from_shape_vec(IxDyn(&[b, d]), data).unwrap())
}
