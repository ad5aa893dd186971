//! One-step conversion and the real-time-factor benchmark.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::diffusion::NoiseSchedule;
use crate::distill::{Checkpoint, SpeakerTable, Student, TrainConfig, TrainMode};
use crate::error::{Error, Result};
use crate::networks::{ContentEncoding, EpsilonPredictor, SpeakerEmbedding};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Cpu,
    Accelerator,
}

impl Device {
    pub fn name(self) -> &'static str {
        match self {
            Device::Cpu => "cpu",
            Device::Accelerator => "accelerator",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cpu" => Ok(Device::Cpu),
            "accelerator" => Ok(Device::Accelerator),
            _ => Err(Error::Config(format!("unknown device {s:?}"))),
        }
    }

    pub fn ensure_available(self) -> Result<()> {
        match self {
            Device::Cpu => Ok(()),
            Device::Accelerator => Err(Error::Config("no accelerator backend in this build".into())),
        }
    }
}

/// Number of denoiser and content-encoder evaluations since creation.
#[derive(Debug, Default)]
pub struct CallCounts {
    denoiser: AtomicUsize,
    content: AtomicUsize,
}

impl CallCounts {
    pub fn denoiser(&self) -> usize {
        self.denoiser.load(Ordering::SeqCst)
    }

    pub fn content(&self) -> usize {
        self.content.load(Ordering::SeqCst)
    }
}

/// Frozen one-step converter.
#[derive(Debug)]
pub struct OneStepModel {
    pub name: String,
    pub student: Student,
    pub schedule: NoiseSchedule,
    pub t_prime: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub speakers: SpeakerTable,
    pub normalizer: Option<Normalizer>,
    pub device: Device,
    pub calls: CallCounts,
}

impl OneStepModel {
    pub fn new(name: impl Into<String>, cfg: &TrainConfig, mut student: Student, speakers: SpeakerTable) -> Result<Self> {
        student.denoiser.vs.set_trainable(false);
        student.content.vs.set_trainable(false);
        let schedule = cfg.schedule().build()?;
        schedule.check_step(cfg.t_prime)?;
        Ok(Self {
            name: name.into(),
            student,
            schedule,
            t_prime: cfg.t_prime,
            hop: cfg.hop,
            sample_rate: cfg.sample_rate,
            speakers,
            normalizer: None,
            device: Device::Cpu,
            calls: CallCounts::default(),
        })
    }

    /// Loads the student of a distillation checkpoint.
    pub fn from_checkpoint(name: impl Into<String>, ck: &Checkpoint) -> Result<Self> {
        let cfg = &ck.header.config;
        if cfg.mode == TrainMode::Teacher || ck.header.kind == "teacher" {
            return Err(Error::Checkpoint("one-step conversion needs a distillation checkpoint".into()));
        }
        let mut student = Student::skeleton(cfg)?;
        ck.load_store("student.denoiser", &mut student.denoiser.vs)?;
        ck.load_store("student.content", &mut student.content.vs)?;
        let mut m = Self::new(name, cfg, student, ck.header.speakers.clone())?;
        m.normalizer = ck.header.normalizer;
        Ok(m)
    }

    pub fn n_mels(&self) -> usize {
        self.student.denoiser.config().n_mels
    }

    pub fn denoiser_params(&self) -> usize {
        self.student.denoiser.num_params()
    }

    pub fn content_params(&self) -> usize {
        self.student.content.num_params()
    }

    pub fn embedding(&self, speaker: usize) -> Result<&SpeakerEmbedding> {
        self.speakers
            .get(&speaker)
            .ok_or_else(|| Error::Conditioning(format!("speaker {speaker} not in checkpoint table")))
    }

    fn check_geometry(&self, source: &ArrayD<f64>, target: &SpeakerEmbedding) -> Result<()> {
        let m = self.n_mels();
        if source.ndim() != 2 || source.shape()[0] != m {
            return Err(Error::Geometry(format!(
                "source mel {:?} does not match model n_mels {m}",
                source.shape()
            )));
        }
        if source.shape()[1] == 0 {
            return Err(Error::Empty("source mel"));
        }
        let d = self.student.denoiser.config().d_spk;
        if target.dim() != d {
            return Err(Error::Geometry(format!(
                "target embedding has {} dims, model expects {d}",
                target.dim()
            )));
        }
        Ok(())
    }

    fn encode(&self, x0: &Tensor) -> Result<Tensor> {
        self.calls.content.fetch_add(1, Ordering::SeqCst);
        self.student.content.encode(x0)
    }

    fn reverse(&self, x0: &Tensor, s: &Tensor, p: &Tensor, eps: &Tensor) -> Result<Tensor> {
        self.calls.denoiser.fetch_add(1, Ordering::SeqCst);
        let tp = vec![self.t_prime; x0.shape()[0]];
        let x_t = self.schedule.diffuse(x0, &tp, eps)?;
        let e = self.student.denoiser.predict_eps(&x_t, &tp, s, p)?;
        self.schedule.denoise_step(&x_t, &tp, &e)
    }

    fn batch_inputs(source: &ArrayD<f64>, target: &SpeakerEmbedding, rng: &mut SeededRng) -> (Tensor, Tensor, Tensor) {
        let x0 = Tensor::constant(source.clone().insert_axis(Axis(0)));
        let s = SpeakerEmbedding::batch(&[target]);
        let eps = Tensor::constant(rng.normal_array(x0.shape()));
        (x0, s, eps)
    }
}

#[derive(Clone, Debug)]
pub struct ConversionRequest {
    /// Normalized `[n_mels, frames]`.
    pub source: ArrayD<f64>,
    pub target: SpeakerEmbedding,
    pub t_prime: usize,
    /// Seed of the noise draw at `t_prime`.
    pub seed: u64,
}

/// Diffuses the source to `t'`, encodes content from the clean source and
/// takes one reverse step toward the target speaker.
pub fn convert_one_step(model: &OneStepModel, req: &ConversionRequest) -> Result<ArrayD<f64>> {
    if req.t_prime != model.t_prime {
        return Err(Error::Config(format!(
            "request t' = {} but checkpoint was trained at {}",
            req.t_prime, model.t_prime
        )));
    }
    model.check_geometry(&req.source, &req.target)?;
    let mut rng = SeededRng::new(req.seed);
    let (x0, s, eps) = OneStepModel::batch_inputs(&req.source, &req.target, &mut rng);
    let p = model.encode(&x0)?;
    let out = model.reverse(&x0, &s, &p, &eps)?;
    if !out.all_finite() {
        return Err(Error::NonFinite("converted mel".into()));
    }
    Ok(out.value().index_axis(Axis(0), 0).to_owned())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtfOptions {
    pub repetitions: usize,
    pub warmup: usize,
    pub device: Device,
    pub seed: u64,
}

impl Default for RtfOptions {
    fn default() -> Self {
        Self {
            repetitions: 30,
            warmup: 5,
            device: Device::Cpu,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub model: String,
    pub device: Device,
    pub frames: usize,
    pub playback_seconds: f64,
    /// Median seconds of the diffuse + denoiser + reverse-step region.
    pub denoiser_seconds: f64,
    pub content_seconds: f64,
    /// Median of per-repetition denoiser + content time.
    pub processing_seconds: f64,
    pub rtf: f64,
    pub repetitions: usize,
    pub warmup: usize,
    pub denoiser_params: usize,
    pub content_params: usize,
}

impl RtfReport {
    pub fn params(&self) -> usize {
        self.denoiser_params + self.content_params
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Timer<'a> {
    model: &'a OneStepModel,
    x0: Tensor,
    s: Tensor,
    eps: Tensor,
    content: Vec<f64>,
    denoiser: Vec<f64>,
}

impl<'a> Timer<'a> {
    fn new(model: &'a OneStepModel, source: &ArrayD<f64>, target: &SpeakerEmbedding, seed: u64) -> Result<Self> {
        model.check_geometry(source, target)?;
        let (x0, s, eps) = OneStepModel::batch_inputs(source, target, &mut SeededRng::new(seed));
        Ok(Self {
            model,
            x0,
            s,
            eps,
            content: Vec::new(),
            denoiser: Vec::new(),
        })
    }

    /// One conversion; the speaker embedding is already resolved, so only
    /// the content encoder and the reverse step are timed.
    fn run(&mut self, record: bool) -> Result<()> {
        let t0 = Instant::now();
        let p = self.model.encode(&self.x0)?;
        let t1 = Instant::now();
        let out = self.model.reverse(&self.x0, &self.s, &p, &self.eps)?;
        let t2 = Instant::now();
        std::hint::black_box(out.value());
        if record {
            self.content.push((t1 - t0).as_secs_f64());
            self.denoiser.push((t2 - t1).as_secs_f64());
        }
        Ok(())
    }

    fn report(mut self, opts: &RtfOptions) -> RtfReport {
        let frames = self.x0.shape()[2];
        let playback = (frames * self.model.hop) as f64 / self.model.sample_rate as f64;
        let mut total: Vec<f64> = self.content.iter().zip(&self.denoiser).map(|(a, b)| a + b).collect();
        let processing = median(&mut total);
        RtfReport {
            model: self.model.name.clone(),
            device: opts.device,
            frames,
            playback_seconds: playback,
            denoiser_seconds: median(&mut self.denoiser),
            content_seconds: median(&mut self.content),
            processing_seconds: processing,
            rtf: processing / playback,
            repetitions: opts.repetitions,
            warmup: opts.warmup,
            denoiser_params: self.model.denoiser_params(),
            content_params: self.model.content_params(),
        }
    }
}

fn check_options(model: &OneStepModel, opts: &RtfOptions) -> Result<()> {
    if opts.repetitions == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    opts.device.ensure_available()?;
    if model.device != opts.device {
        return Err(Error::Config(format!(
            "model {} is on {} but benchmark requested {}",
            model.name,
            model.device.name(),
            opts.device.name()
        )));
    }
    Ok(())
}

/// Median content-encoder + one-step denoiser time over playback time.
pub fn measure_rtf(
    model: &OneStepModel,
    source: &ArrayD<f64>,
    target: &SpeakerEmbedding,
    opts: &RtfOptions,
) -> Result<RtfReport> {
    check_options(model, opts)?;
    let mut timer = Timer::new(model, source, target, opts.seed)?;
    for _ in 0..opts.warmup {
        timer.run(false)?;
    }
    for _ in 0..opts.repetitions {
        timer.run(true)?;
    }
    Ok(timer.report(opts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfComparison {
    pub a: RtfReport,
    pub b: RtfReport,
    /// `rtf(a) / rtf(b)`: how many times faster `b` is.
    pub ratio: f64,
    pub content_ratio: f64,
    pub denoiser_ratio: f64,
}

impl RtfComparison {
    /// Aligned plain-text table with columns model, device, rtf, params.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:<12} {:>12} {:>10}", "model", "device", "rtf", "params");
        for r in [&self.a, &self.b] {
            let _ = writeln!(s, "{:<24} {:<12} {:>12.6} {:>10}", r.model, r.device.name(), r.rtf, r.params());
        }
        let _ = writeln!(s, "speedup {:.3}x (content {:.3}x, denoiser {:.3}x)", self.ratio, self.content_ratio, self.denoiser_ratio);
        s
    }
}

/// Times both models on the same inputs. Repetitions are interleaved so
/// that slow drifts of the machine affect both equally.
pub fn compare_models_rtf(
    a: &OneStepModel,
    b: &OneStepModel,
    source: &ArrayD<f64>,
    target: &SpeakerEmbedding,
    opts: &RtfOptions,
) -> Result<RtfComparison> {
    check_options(a, opts)?;
    check_options(b, opts)?;
    let mut ta = Timer::new(a, source, target, opts.seed)?;
    let mut tb = Timer::new(b, source, target, opts.seed)?;
    for _ in 0..opts.warmup {
        ta.run(false)?;
        tb.run(false)?;
    }
    for _ in 0..opts.repetitions {
        ta.run(true)?;
        tb.run(true)?;
    }
    let (a, b) = (ta.report(opts), tb.report(opts));
    Ok(RtfComparison {
        ratio: a.rtf / b.rtf,
        content_ratio: a.content_seconds / b.content_seconds,
        denoiser_ratio: a.denoiser_seconds / b.denoiser_seconds,
        a,
        b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::Teacher;

    fn tiny_model() -> OneStepModel {
        let cfg = TrainConfig {
            mode: TrainMode::Adcd,
            ..Default::default()
        };
        let mut rng = SeededRng::new(1);
        let teacher = Teacher::new(&cfg, &mut rng).unwrap();
        let student = Student::from_teacher(&cfg, &teacher, &mut rng).unwrap();
        let mut table = SpeakerTable::new();
        table.insert(0, SpeakerEmbedding::new(vec![1.0; cfg.d_spk]).unwrap());
        OneStepModel::new("tiny", &cfg, student, table).unwrap()
    }

    #[test]
    fn one_call_each_and_shape_preserved() {
        let m = tiny_model();
        let src = SeededRng::new(2).normal_array(&[m.n_mels(), 21]);
        let req = ConversionRequest {
            source: src.clone(),
            target: m.embedding(0).unwrap().clone(),
            t_prime: m.t_prime,
            seed: 9,
        };
        let out = convert_one_step(&m, &req).unwrap();
        assert_eq!(out.shape(), src.shape());
        assert_eq!((m.calls.denoiser(), m.calls.content()), (1, 1));
        assert_eq!(out, convert_one_step(&m, &req).unwrap());
    }

    #[test]
    fn wrong_t_prime_and_geometry_rejected() {
        let m = tiny_model();
        let target = m.embedding(0).unwrap().clone();
        let bad_t = ConversionRequest {
            source: ArrayD::zeros(ndarray::IxDyn(&[m.n_mels(), 8])),
            target: target.clone(),
            t_prime: m.t_prime - 1,
            seed: 0,
        };
        assert!(matches!(convert_one_step(&m, &bad_t), Err(Error::Config(_))));
        let bad_m = ConversionRequest {
            source: ArrayD::zeros(ndarray::IxDyn(&[m.n_mels() + 1, 8])),
            t_prime: m.t_prime,
            ..bad_t
        };
        assert!(matches!(convert_one_step(&m, &bad_m), Err(Error::Geometry(_))));
    }

    #[test]
    fn rtf_counts_and_denominator() {
        let m = tiny_model();
        let src = ArrayD::zeros(ndarray::IxDyn(&[m.n_mels(), 87]));
        let opts = RtfOptions {
            repetitions: 3,
            warmup: 2,
            ..Default::default()
        };
        let r = measure_rtf(&m, &src, m.embedding(0).unwrap(), &opts).unwrap();
        assert_eq!(m.calls.denoiser(), 5);
        assert!((r.playback_seconds - 87.0 * 256.0 / 22050.0).abs() < 1e-12);
        assert!(r.rtf > 0.0);
        assert_eq!(r.params(), m.denoiser_params() + m.content_params());
        let zero = RtfOptions { repetitions: 0, ..opts };
        assert!(measure_rtf(&m, &src, m.embedding(0).unwrap(), &zero).is_err());
        let acc = RtfOptions { device: Device::Accelerator, ..opts };
        assert!(measure_rtf(&m, &src, m.embedding(0).unwrap(), &acc).is_err());
    }

    #[test]
    fn empty_input_rejected() {
        let m = tiny_model();
        let src = ArrayD::zeros(ndarray::IxDyn(&[m.n_mels(), 0]));
        assert!(matches!(
            measure_rtf(&m, &src, m.embedding(0).unwrap(), &RtfOptions::default()),
            Err(Error::Empty(_))
        ));
    }
}
