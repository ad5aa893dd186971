//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 1 4 9`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use ndarray::ArrayD;
use vcdistill::data::{generate_synthetic_corpus, split_unseen, Corpus, SyntheticConfig, SyntheticRegistry};
use vcdistill::distill::{
    build_batch_conditioning, speaker_table, Checkpoint, DistillTrainer, SpeakerTable, Student, StepRecord, Teacher,
    TeacherTrainer, TrainConfig, TrainData, TrainMode,
};
use vcdistill::eval::{run_ablation_with, AblationMode, AblationSetup, AblationTable};
use vcdistill::inference::{compare_models_rtf, measure_rtf, OneStepModel, RtfOptions};
use vcdistill::losses::{
    adv_loss_discriminator, adv_loss_generator, ddpm_loss, feature_matching_loss, inverse_score_distillation_loss,
    l1_mean, score_distillation_loss, teacher_target, total_generator_loss, weighted_distance, GeneratorTerms,
    LossMode,
};
use vcdistill::networks::discriminator::{DiscriminatorConfig, Signal};
use vcdistill::networks::{
    ContentEncoderConfig, ContentEncoding, Denoiser, DenoiserConfig, MultiDiscriminator, SpeakerEmbedding,
};
use vcdistill::nn::VarStore;
use vcdistill::{make_schedule, ScheduleKind, ScheduleSpec, SeededRng, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn out_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&d).unwrap();
    d
}

// ---------------------------------------------------------------------------
// 1: diffusion kernels

/// Scalar-loop linear schedule, 1-based: `(beta_t, alpha_t, alpha_bar_t)`.
fn oracle_schedule(steps: usize, b0: f64, b1: f64, t: usize) -> (f64, f64, f64) {
    let beta = |i: usize| {
        if steps == 1 {
            b0
        } else {
            b0 + (b1 - b0) * (i - 1) as f64 / (steps - 1) as f64
        }
    };
    let mut ab = 1.0;
    for i in 1..=t {
        ab *= 1.0 - beta(i);
    }
    (beta(t), 1.0 - beta(t), ab)
}

fn c1_kernels() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    let mut worst_rt: f64 = 0.0;
    let paper = ScheduleSpec::default();
    for k in 0..100 {
        let (steps, b0, b1) = if k < 10 {
            (paper.steps, paper.beta_start, paper.beta_end)
        } else {
            let steps = rng.int_inclusive(1, 1000);
            let b0 = 1e-5 + rng.uniform() * 1e-2;
            (steps, b0, b0 + rng.uniform() * 0.3)
        };
        let sched = make_schedule(steps, b0, b1, ScheduleKind::Linear).map_err(|e| e.to_string())?;
        let t = rng.int_inclusive(1, steps);
        let shape = [1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(7)];
        let x0 = rng.normal_array(&shape);
        let eps = rng.normal_array(&shape);
        let eps_hat = rng.normal_array(&shape);
        let (_, a, ab) = oracle_schedule(steps, b0, b1, t);

        let fwd = sched.forward_diffuse(&x0, t, &eps).map_err(|e| e.to_string())?.x_t;
        let rev = sched.reverse_step(&fwd, t, &eps_hat).map_err(|e| e.to_string())?;
        let b = shape[0];
        let ts = vec![t; b];
        let fwd_batched = sched
            .diffuse(&Tensor::constant(x0.clone()), &ts, &Tensor::constant(eps.clone()))
            .map_err(|e| e.to_string())?;
        let rev_batched = sched
            .denoise_step(&Tensor::constant(fwd.clone()), &ts, &Tensor::constant(eps_hat.clone()))
            .map_err(|e| e.to_string())?;
        for i in 0..x0.len() {
            let (xv, ev, hv) = (x0.as_slice().unwrap()[i], eps.as_slice().unwrap()[i], eps_hat.as_slice().unwrap()[i]);
            let want_f = ab.sqrt() * xv + (1.0 - ab).sqrt() * ev;
            let got_f = fwd.as_slice().unwrap()[i];
            let want_r = (got_f - (1.0 - a) / (1.0 - ab).sqrt() * hv) / a.sqrt();
            for d in [
                got_f - want_f,
                fwd_batched.value().as_slice().unwrap()[i] - want_f,
                rev.as_slice().unwrap()[i] - want_r,
                rev_batched.value().as_slice().unwrap()[i] - want_r,
            ] {
                worst = worst.max(d.abs());
            }
        }
        // With the true noise at t = 1 the reverse step returns x0.
        let d1 = sched.forward_diffuse(&x0, 1, &eps).map_err(|e| e.to_string())?;
        let back = sched.reverse_step(&d1.x_t, 1, &eps).map_err(|e| e.to_string())?;
        for (u, v) in back.iter().zip(x0.iter()) {
            worst_rt = worst_rt.max((u - v).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-6, format!("max kernel error {worst:.3e} > 1e-6"))?;
    ensure(worst_rt <= 1e-6, format!("t=1 round trip error {worst_rt:.3e} > 1e-6"))?;
    ensure(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "100 instances, max error {worst:.2e}, t=1 round trip {worst_rt:.2e}, {secs:.2} s"
    ))
}

// ---------------------------------------------------------------------------
// 2: loss gradients and stop-gradient

const H: f64 = 1e-6;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Analytic gradient of `f` at `x` against central differences of `g`
/// (usually `g == f`).
fn fd_input(x: &ArrayD<f64>, f: impl Fn(&Tensor) -> Tensor, g: impl Fn(&Tensor) -> Tensor) -> f64 {
    let xv = Tensor::var(x.clone());
    let a: Vec<f64> = f(&xv).backward().get_or_zeros(&xv).iter().copied().collect();
    let n: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[i] += H;
            m.as_slice_mut().unwrap()[i] -= H;
            (g(&Tensor::constant(p)).item() - g(&Tensor::constant(m)).item()) / (2.0 * H)
        })
        .collect();
    assert!(a.iter().any(|v| v.abs() > 1e-10), "vanishing gradient");
    rel_err(&a, &n)
}

fn perturbed(vs: &VarStore, block: &str, i: usize, delta: f64) -> VarStore {
    let blocks: Vec<(String, ArrayD<f64>)> = vs
        .iter()
        .map(|(n, t)| {
            let mut v = t.value().clone();
            if n == block {
                v.as_slice_mut().unwrap()[i] += delta;
            }
            (n.to_string(), v)
        })
        .collect();
    let mut out = vs.clone();
    out.load_blocks(blocks.iter().map(|(n, v)| (n.as_str(), v))).unwrap();
    out
}

fn fd_params(vs: &VarStore, rng: &mut SeededRng, mut f: impl FnMut(&VarStore) -> Tensor) -> f64 {
    let grads = f(vs).backward();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (name, t) in vs.iter() {
        let g = grads.get_or_zeros(t);
        for _ in 0..2.min(t.len()) {
            let i = rng.below(t.len());
            a.push(g.as_slice().unwrap()[i]);
            let fp = f(&perturbed(vs, name, i, H)).item();
            let fm = f(&perturbed(vs, name, i, -H)).item();
            n.push((fp - fm) / (2.0 * H));
        }
    }
    rel_err(&a, &n)
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Adcd,
        content_trainable: true,
        n_mels: 4,
        hidden: 4,
        layers: 6,
        downsample_stages: 2,
        kernel: 3,
        d_spk: 3,
        d_content: 2,
        time_dim: 4,
        content_hidden: 3,
        content_layers: 1,
        teacher_content_hidden: 3,
        teacher_content_layers: 1,
        disc_channels: 3,
        disc_layers: 2,
        diffusion_steps: 20,
        t_prime: 18,
        ..Default::default()
    }
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(202);
    let cfg = tiny_cfg();
    let sched = cfg.schedule().build().map_err(|e| e.to_string())?;
    let teacher = Teacher::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let den = &teacher.denoiser;
    let (b, m, f) = (2, cfg.n_mels, 8);
    let x0 = Tensor::constant(rng.normal_array(&[b, m, f]));
    let eps = Tensor::constant(rng.normal_array(&[b, m, f]));
    let s = Tensor::constant(rng.normal_array(&[b, cfg.d_spk]));
    let s_other = Tensor::constant(rng.normal_array(&[b, cfg.d_spk]));
    let p = Tensor::constant(rng.normal_array(&[b, cfg.d_content, f]) * 0.5);
    let t = [4usize, 15];
    let x = rng.normal_array(&[b, m, f]);
    let target = Tensor::constant(rng.normal_array(&[b, m, f]));
    let disc = MultiDiscriminator::new(
        &DiscriminatorConfig {
            channels: 3,
            layers: 2,
            kernel: 3,
            ..DiscriminatorConfig::mel(m)
        },
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let real = Signal::Mel(Tensor::constant(rng.normal_array(&[b, m, f])));

    let mut errs: Vec<(&str, f64)> = Vec::new();
    errs.push(("l1", fd_input(&x, |v| l1_mean(v, &target), |v| l1_mean(v, &target))));
    errs.push((
        "weighted distance",
        fd_input(
            &x,
            |v| weighted_distance(v, &target, &sched, &t).unwrap(),
            |v| weighted_distance(v, &target, &sched, &t).unwrap(),
        ),
    ));
    let mut probe = den.clone();
    errs.push((
        "ddpm (params)",
        fd_params(&den.vs, &mut rng, |vs| {
            probe.vs = vs.clone();
            ddpm_loss(&probe, &sched, &x0, &t, &eps, &s, &p).unwrap()
        }),
    ));
    let gen = |v: &Tensor| Signal::Mel(v.clone());
    errs.push((
        "adversarial generator",
        fd_input(&x, |v| adv_loss_generator(&disc, &gen(v)).unwrap(), |v| adv_loss_generator(&disc, &gen(v)).unwrap()),
    ));
    errs.push((
        "feature matching",
        fd_input(
            &x,
            |v| feature_matching_loss(&disc, &gen(v), &real).unwrap(),
            |v| feature_matching_loss(&disc, &gen(v), &real).unwrap(),
        ),
    ));
    let fake = Signal::Mel(Tensor::constant(x.clone()));
    let mut dprobe = disc.clone();
    errs.push((
        "adversarial discriminator (params)",
        fd_params(&disc.vs, &mut rng, |vs| {
            dprobe.vs = vs.clone();
            adv_loss_discriminator(&dprobe, &real, &fake).unwrap()
        }),
    ));
    // Score distillation: the target is a constant, so the finite
    // difference is taken against the distance to the frozen target.
    let frozen = teacher_target(&Tensor::constant(x.clone()), &s, &p, den, &sched, &t, &eps).map_err(|e| e.to_string())?;
    errs.push((
        "score distillation",
        fd_input(
            &x,
            |v| score_distillation_loss(v, &s, &p, den, &sched, &t, &eps).unwrap(),
            |v| weighted_distance(v, &frozen, &sched, &t).unwrap(),
        ),
    ));
    let frozen_inv =
        teacher_target(&Tensor::constant(x.clone()), &s_other, &p, den, &sched, &t, &eps).map_err(|e| e.to_string())?;
    errs.push((
        "inverse score distillation",
        fd_input(
            &x,
            |v| inverse_score_distillation_loss(v, &s_other, &s, &p, den, &sched, &t, &eps).unwrap(),
            |v| weighted_distance(v, &frozen_inv, &sched, &t).unwrap().neg(),
        ),
    ));
    let vals = ndarray::arr1(&[0.3, -0.7, 1.1, 0.4, -0.2, 0.9, 0.5]).into_dyn();
    let total = |v: &Tensor| {
        let part = |i: usize| Some(v.narrow(0, i, 1).sum_all());
        let terms = GeneratorTerms {
            adv: part(0),
            fm: part(1),
            dist: part(2),
            dist_cv2: part(3),
            inv: part(4),
            inv_cv2: part(5),
            align: part(6),
        };
        total_generator_loss(&terms, &cfg.weights(), LossMode::Adcd).unwrap().0
    };
    errs.push(("total objective", fd_input(&vals, total, total)));
    let bad: Vec<String> = errs
        .iter()
        .filter(|(_, e)| !(*e < 1e-3))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    ensure(bad.is_empty(), format!("finite differences disagree: {}", bad.join(", ")))?;
    let fd_worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);

    // Stop-gradient: a trainable teacher receives no gradient from any
    // distillation form, the student does.
    let dcfg = TrainConfig {
        mode: TrainMode::Adcd,
        content_trainable: true,
        ..Default::default()
    };
    let sched = dcfg.schedule().build().map_err(|e| e.to_string())?;
    let mut teacher = Teacher::new(&dcfg, &mut rng).map_err(|e| e.to_string())?;
    teacher.denoiser.vs.set_trainable(true);
    teacher.content.vs.set_trainable(true);
    let student = Student::from_teacher(&dcfg, &teacher, &mut rng).map_err(|e| e.to_string())?;
    let (b, m, f) = (4, dcfg.n_mels, dcfg.crop_frames);
    let x0 = Tensor::constant(rng.normal_array(&[b, m, f]) * 0.5);
    let row = |rng: &mut SeededRng| Tensor::constant(rng.normal_array(&[b, dcfg.d_spk]));
    let (s_src, s_tgt, s_tgt2, s_inv) = (row(&mut rng), row(&mut rng), row(&mut rng), row(&mut rng));
    let e = |rng: &mut SeededRng| Tensor::constant(rng.normal_array(&[b, m, f]));
    let t = [3usize, 17, 30, 49];
    let p_teacher = teacher.content.encode(&x0).map_err(|e| e.to_string())?;
    let (e1, e2, e3) = (e(&mut rng), e(&mut rng), e(&mut rng));
    let forms: Vec<(&str, Tensor)> = {
        let (x_rec, _) = student.convert(&x0, &s_src, &sched, dcfg.t_prime, &e1).map_err(|e| e.to_string())?;
        let (x_cv, _) = student.convert(&x0, &s_tgt, &sched, dcfg.t_prime, &e1).map_err(|e| e.to_string())?;
        let (x_cv2, _) = student.convert(&x_cv, &s_tgt2, &sched, dcfg.t_prime, &e2).map_err(|e| e.to_string())?;
        let den = &teacher.denoiser;
        vec![
            ("reconstruction", score_distillation_loss(&x_rec, &s_src, &p_teacher, den, &sched, &t, &e3)),
            ("conversion", score_distillation_loss(&x_cv, &s_tgt, &p_teacher, den, &sched, &t, &e3)),
            ("reconversion", score_distillation_loss(&x_cv2, &s_tgt2, &p_teacher, den, &sched, &t, &e3)),
            (
                "inverse",
                inverse_score_distillation_loss(&x_cv, &s_inv, &s_tgt, &p_teacher, den, &sched, &t, &e3),
            ),
        ]
        .into_iter()
        .map(|(n, l)| l.map(|l| (n, l)))
        .collect::<vcdistill::Result<_>>()
        .map_err(|e| e.to_string())?
    };
    for (name, loss) in &forms {
        let grads = loss.backward();
        for (store, label) in [(&teacher.denoiser.vs, "teacher denoiser"), (&teacher.content.vs, "teacher content")] {
            for (block, p) in store.iter() {
                if let Some(g) = grads.get(p) {
                    let mx = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                    ensure(mx == 0.0, format!("{name}: {label} block {block} has gradient {mx:.3e}"))?;
                }
            }
        }
        let student_norm: f64 = student
            .denoiser
            .vs
            .iter()
            .chain(student.content.vs.iter())
            .map(|(_, p)| grads.get_or_zeros(p).iter().map(|v| v * v).sum::<f64>())
            .sum();
        ensure(student_norm > 0.0, format!("{name}: student receives no gradient"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} finite-difference checks, worst relative error {fd_worst:.2e}; teacher gradient zero in 4 forms; {secs:.1} s",
        errs.len()
    ))
}

// ---------------------------------------------------------------------------
// 3: objective weighting and sign of the inverse term

fn c3_objective() -> Outcome {
    let cfg = TrainConfig::paper();
    let one = || Some(Tensor::scalar(1.0));
    let terms = GeneratorTerms {
        adv: one(),
        fm: one(),
        dist: one(),
        dist_cv2: one(),
        inv: one(),
        inv_cv2: one(),
        align: None,
    };
    let (total, _) = total_generator_loss(&terms, &cfg.weights(), LossMode::Adcd).map_err(|e| e.to_string())?;
    ensure(total.item() == 138.0, format!("unit components give {}", total.item()))?;

    let tc = tiny_cfg();
    let sched = tc.schedule().build().map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(303);
    let mut worst = f64::NEG_INFINITY;
    let samples = 200;
    for k in 0..samples {
        let den = Denoiser::new(&tc.denoiser(), &mut rng).map_err(|e| e.to_string())?;
        let b = 1 + k % 4;
        let f = 4 + k % 5;
        let x = Tensor::constant(rng.normal_array(&[b, tc.n_mels, f]) * (1.0 + rng.uniform() * 3.0));
        let s_tgt = Tensor::constant(rng.normal_array(&[b, tc.d_spk]));
        let s_inv = Tensor::constant(rng.normal_array(&[b, tc.d_spk]));
        let p = Tensor::constant(rng.normal_array(&[b, tc.d_content, f]));
        let t: Vec<usize> = (0..b).map(|_| rng.int_inclusive(1, sched.steps())).collect();
        let eps = Tensor::constant(rng.normal_array(&[b, tc.n_mels, f]));
        let v = inverse_score_distillation_loss(&x, &s_inv, &s_tgt, &p, &den, &sched, &t, &eps)
            .map_err(|e| e.to_string())?
            .item();
        worst = worst.max(v);
    }
    ensure(worst <= 0.0, format!("inverse loss reached {worst}"))?;
    Ok(format!("unit components total 138; max inverse loss over {samples} samples {worst:.3e}"))
}

// ---------------------------------------------------------------------------
// 4: conditioning invariants

fn c4_conditioning(shared: &Desk) -> Outcome {
    let data = &shared.data;
    let owner: BTreeMap<Vec<u64>, usize> = data
        .table
        .iter()
        .map(|(&k, e)| (e.as_slice().iter().map(|v| v.to_bits()).collect(), k))
        .collect();
    let who = |t: &Tensor, i: usize| -> Option<usize> {
        let r: Vec<u64> = t.value().index_axis(ndarray::Axis(0), i).iter().map(|v| v.to_bits()).collect();
        owner.get(&r).copied()
    };
    let mut rng = SeededRng::new(404);
    let (mut violations, mut rows) = (0usize, 0usize);
    for _ in 0..10_000 {
        let size = rng.int_inclusive(2, 32);
        let (_, spk) = data.sample_batch(size, &mut rng);
        let cond = match build_batch_conditioning(&spk, &data.table, &mut rng, true) {
            Ok(c) => c,
            Err(_) => {
                violations += size;
                continue;
            }
        };
        if cond.degraded {
            violations += size;
            continue;
        }
        for i in 0..size {
            rows += 1;
            let (src, tgt, inv) = (who(&cond.s_src, i), who(&cond.s_tgt, i), who(&cond.s_inv, i));
            let ok = src == Some(spk[i])
                && tgt.is_some()
                && inv.is_some()
                && tgt != src
                && inv != tgt
                && cond.tgt[i] != spk[i]
                && cond.inv[i] != cond.tgt[i];
            if !ok {
                violations += 1;
            }
        }
    }
    ensure(violations == 0, format!("{violations} violating rows"))?;
    Ok(format!("10000 batches of 2..=32 ({rows} rows), 0 violations"))
}

// ---------------------------------------------------------------------------
// Shared desk setup: corpus, teacher and the ablation runs.

struct Desk {
    /// Speakers and utterances generated before the split.
    generated: (usize, usize),
    eval: Corpus,
    registry: SyntheticRegistry,
    data: TrainData,
    base: TrainConfig,
}

fn desk_corpus() -> Desk {
    let (corpus, registry) = generate_synthetic_corpus(&SyntheticConfig::default(), &mut SeededRng::new(0)).unwrap();
    let generated = (corpus.speakers().len(), corpus.records.len());
    let (train, eval) = split_unseen(&corpus, &[16, 17, 18, 19], &[9, 10, 11]).unwrap();
    let table = speaker_table(&train, &registry.embedder()).unwrap();
    let base = TrainConfig {
        epochs: 120,
        ..Default::default()
    };
    let data = TrainData::new(&train, table, base.crop_frames).unwrap();
    Desk {
        generated,
        eval,
        registry,
        data,
        base,
    }
}

fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(desk_corpus)
}

struct Trained {
    table: AblationTable,
    teacher_secs: f64,
    /// Train + evaluate wall time per (label, seed).
    run_secs: BTreeMap<(String, u64), f64>,
}

const TABLE1: [AblationMode; 4] = [
    AblationMode::FastvoicegradContent,
    AblationMode::Conversion,
    AblationMode::Reconversion,
    AblationMode::Inverse,
];
const TABLE2: [AblationMode; 2] = [AblationMode::Direct { layers: 1 }, AblationMode::Adcd { layers: 1 }];

fn train_all() -> Trained {
    let d = desk();
    let tcfg = TrainConfig {
        mode: TrainMode::Teacher,
        learning_rate: 1e-3,
        encoder_epochs: 30,
        epochs: 300,
        ..Default::default()
    };
    eprintln!("acceptance: training teacher ({} utterances)", d.data.len());
    let t0 = Instant::now();
    let mut tt = TeacherTrainer::new(&tcfg, d.data.table.clone(), None).unwrap();
    let mut log: Vec<StepRecord> = Vec::new();
    tt.run(&d.data, &mut log).unwrap();
    let teacher_secs = t0.elapsed().as_secs_f64();

    let embedder = d.registry.embedder();
    let setup = AblationSetup {
        teacher: &tt.teacher,
        train: &d.data,
        eval: &d.eval,
        registry: Some(&d.registry),
        embedder: &embedder,
        base: d.base.clone(),
        seeds: vec![0, 1, 2],
    };
    let starts: Mutex<Vec<((String, u64), Instant)>> = Mutex::new(Vec::new());
    let modes: Vec<AblationMode> = TABLE1.iter().chain(TABLE2.iter()).copied().collect();
    let table = run_ablation_with(&modes, &setup, &mut |mode, seed| {
        eprintln!("acceptance: distilling {} seed {seed}", mode.label());
        starts.lock().unwrap().push(((mode.label(), seed), Instant::now()));
        Ok(Box::new(Vec::<StepRecord>::new()))
    })
    .unwrap();
    let end = Instant::now();
    let starts = starts.into_inner().unwrap();
    let run_secs = starts
        .iter()
        .enumerate()
        .map(|(i, (k, s))| {
            let next = starts.get(i + 1).map_or(end, |(_, n)| *n);
            (k.clone(), (next - *s).as_secs_f64())
        })
        .collect();
    let dir = out_dir();
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table).unwrap()).unwrap();
    fs::write(dir.join("ablation.txt"), table.text()).unwrap();
    println!("{}", table.text().trim_end());
    Trained {
        table,
        teacher_secs,
        run_secs,
    }
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(train_all)
}

fn per_seed(tr: &Trained, mode: AblationMode, f: impl Fn(&vcdistill::eval::EvalSummary) -> f64) -> String {
    let r = tr.table.row(mode).unwrap();
    r.per_seed.iter().map(|s| format!("{:.3}", f(s))).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------------------
// 5: collapse of reconstruction-only distillation vs conversion distillation

fn c5_collapse() -> Outcome {
    let d = desk();
    let (speakers, utts) = d.generated;
    ensure(speakers >= 4 && utts >= 200, format!("corpus has {speakers} speakers, {utts} utterances"))?;
    let tr = trained();
    let fvg = tr.table.row(AblationMode::FastvoicegradContent).unwrap();
    let adcd = tr.table.row(AblationMode::Inverse).unwrap();
    let adcd_secs = tr.teacher_secs + tr.run_secs[&(AblationMode::Inverse.label(), 0)];
    let detail = format!(
        "fastvoicegrad+content tgt {:.3} src {:.3}; adcd tgt {:.3} src {:.3} (margin {:+.3}); teacher + adcd run {:.0} s",
        fvg.secs_to_target,
        fvg.secs_to_source,
        adcd.secs_to_target,
        adcd.secs_to_source,
        adcd.secs_to_target - adcd.secs_to_source,
        adcd_secs
    );
    ensure(
        fvg.secs_to_source >= fvg.secs_to_target,
        format!("reconstruction-only student does not collapse to the source: {detail}"),
    )?;
    ensure(
        adcd.secs_to_target - adcd.secs_to_source >= 0.05,
        format!("conversion distillation margin below 0.05: {detail}"),
    )?;
    ensure(adcd_secs <= 1800.0, format!("over 30 min: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6, 7: ablation orderings

fn c6_components() -> Outcome {
    let tr = trained();
    let v = |m| tr.table.row(m).unwrap().secs_to_target;
    let (fvg, conv, recv, inv) = (
        v(AblationMode::FastvoicegradContent),
        v(AblationMode::Conversion),
        v(AblationMode::Reconversion),
        v(AblationMode::Inverse),
    );
    let detail = format!(
        "secs_to_target over 3 seeds: fastvoicegrad+content {fvg:.4} ({}), +conversion {conv:.4} ({}), +reconversion {recv:.4} ({}), +inverse {inv:.4} ({})",
        per_seed(tr, AblationMode::FastvoicegradContent, |s| s.secs_to_target),
        per_seed(tr, AblationMode::Conversion, |s| s.secs_to_target),
        per_seed(tr, AblationMode::Reconversion, |s| s.secs_to_target),
        per_seed(tr, AblationMode::Inverse, |s| s.secs_to_target),
    );
    ensure(conv > fvg, format!("+conversion does not beat fastvoicegrad+content: {detail}"))?;
    ensure(inv >= recv, format!("+inverse reduces speaker similarity: {detail}"))?;
    Ok(detail)
}

fn c7_methods() -> Outcome {
    let tr = trained();
    let (direct, adcd) = (AblationMode::Direct { layers: 1 }, AblationMode::Adcd { layers: 1 });
    let (a, b) = (tr.table.row(direct).unwrap(), tr.table.row(adcd).unwrap());
    let detail = format!(
        "secs_to_target over 3 seeds: direct(1) {:.4} ({}), adcd(1) {:.4} ({})",
        a.secs_to_target,
        per_seed(tr, direct, |s| s.secs_to_target),
        b.secs_to_target,
        per_seed(tr, adcd, |s| s.secs_to_target),
    );
    ensure(b.secs_to_target > a.secs_to_target, format!("adcd(1) does not beat direct(1): {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8: real-time factor harness

fn oracle_denoiser_params(c: &DenoiserConfig) -> usize {
    let h = c.hidden;
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + 2 * cout;
    let lin = |i: usize, o: usize| i * o + o;
    let per_block = lin(h, h) + lin(c.d_spk, 2 * h) + conv(c.d_content, 2 * h, 1) + conv(h, 2 * h, c.kernel);
    conv(c.n_mels, h, 1) + lin(c.time_dim, h) + c.layers * per_block + conv(h, c.n_mels, 1)
}

fn oracle_content_params(c: &ContentEncoderConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + 2 * cout;
    let mut n = conv(c.n_mels, 2 * c.hidden, c.kernel);
    for _ in 1..c.layers {
        n += conv(c.hidden, 2 * c.hidden, c.kernel);
    }
    n + conv(c.hidden, c.d_content, 1)
}

fn model_with(cfg: &TrainConfig, name: &str, rng: &mut SeededRng) -> Result<OneStepModel, String> {
    let teacher = Teacher::new(cfg, rng).map_err(|e| e.to_string())?;
    let student = Student::from_teacher(cfg, &teacher, rng).map_err(|e| e.to_string())?;
    let table: SpeakerTable = [(0, SpeakerEmbedding::new(rng.normal_array(&[cfg.d_spk]).into_raw_vec_and_offset().0).unwrap())]
        .into_iter()
        .collect();
    OneStepModel::new(name, cfg, student, table).map_err(|e| e.to_string())
}

fn c8_rtf() -> Outcome {
    let mut rng = SeededRng::new(808);
    let cfg = TrainConfig {
        mode: TrainMode::Adcd,
        content_trainable: true,
        ..Default::default()
    };
    let frames = 87;
    let source = rng.normal_array(&[cfg.n_mels, frames]) * 0.5;
    let target = SpeakerEmbedding::new(rng.normal_array(&[cfg.d_spk]).into_raw_vec_and_offset().0).unwrap();
    let opts = RtfOptions {
        repetitions: 60,
        warmup: 10,
        ..Default::default()
    };

    // Identical checkpoints through save/load.
    let teacher = Teacher::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let table: SpeakerTable = [(0, target.clone())].into_iter().collect();
    let trainer = DistillTrainer::new(&cfg, &teacher, table, None).map_err(|e| e.to_string())?;
    let path = out_dir().join("rtf.ckpt");
    trainer.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let a = OneStepModel::from_checkpoint("a", &ck).map_err(|e| e.to_string())?;
    let b = OneStepModel::from_checkpoint("b", &ck).map_err(|e| e.to_string())?;
    let cmp = compare_models_rtf(&a, &b, &source, &target, &opts).map_err(|e| e.to_string())?;
    let playback = (frames * cfg.hop) as f64 / cfg.sample_rate as f64;
    for r in [&cmp.a, &cmp.b] {
        ensure((r.playback_seconds - playback).abs() < 1e-12, "playback seconds")?;
        ensure((r.rtf - r.processing_seconds / r.playback_seconds).abs() < 1e-15, "rtf definition")?;
        ensure(r.processing_seconds > 0.0 && r.repetitions == opts.repetitions, "timing")?;
    }
    ensure(
        (0.9..=1.1).contains(&cmp.ratio),
        format!("identical checkpoints give ratio {:.3}", cmp.ratio),
    )?;

    // Content-encoder time grows with depth.
    let mut times = Vec::new();
    for layers in [1, 3, 6] {
        let c = TrainConfig {
            content_layers: layers,
            ..cfg.clone()
        };
        let model = model_with(&c, &format!("content{layers}"), &mut rng)?;
        let r = measure_rtf(&model, &source, &target, &opts).map_err(|e| e.to_string())?;
        ensure(r.content_params == oracle_content_params(&c.student_content()), "content params")?;
        times.push(r.content_seconds);
    }
    ensure(
        times[0] < times[1] && times[1] < times[2],
        format!("content time not monotone over 1/3/6 layers: {times:?}"),
    )?;

    // Parameter counts against the closed form, at desk and full size.
    let desk_den = oracle_denoiser_params(&cfg.denoiser());
    ensure(a.denoiser_params() == desk_den && cmp.a.denoiser_params == desk_den, "denoiser params (desk)")?;
    let full = TrainConfig::paper();
    ensure(full.denoiser().param_count() == oracle_denoiser_params(&full.denoiser()), "denoiser params (full)")?;
    for c in [full.student_content(), full.teacher_content()] {
        ensure(c.param_count() == oracle_content_params(&c), "content params (full)")?;
    }
    Ok(format!(
        "identical-checkpoint ratio {:.3}; content time {:.1}/{:.1}/{:.1} us for 1/3/6 layers; denoiser {} params",
        cmp.ratio,
        times[0] * 1e6,
        times[1] * 1e6,
        times[2] * 1e6,
        desk_den
    ))
}

// ---------------------------------------------------------------------------
// 9: reproducibility and checkpoint round trip through the CLI

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vcdistill")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn c9_reproducible() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    fs::write(root.join("cfg.txt"), "epochs = 3\nencoder_epochs = 2\n").map_err(|e| e.to_string())?;
    cli(&["gen-corpus", "--out", &p("corpus"), "--n-speakers", "8", "--n-contents", "4", "--seed", "3"])?;
    cli(&["train-teacher", "--corpus", &p("corpus"), "--config", &p("cfg.txt"), "--out", &p("teacher")])?;
    for run in ["a", "b"] {
        cli(&[
            "distill",
            "--mode",
            "adcd",
            "--seed",
            "11",
            "--corpus",
            &p("corpus"),
            "--teacher",
            &p("teacher/teacher.ckpt"),
            "--config",
            &p("cfg.txt"),
            "--out",
            &p(run),
        ])?;
    }
    let read = |s: &str| fs::read(root.join(s)).map_err(|e| e.to_string());
    let (ma, mb) = (read("a/metrics.jsonl")?, read("b/metrics.jsonl")?);
    ensure(!ma.is_empty() && ma == mb, "metrics.jsonl differs between identical runs")?;
    let bytes = read("a/student.ckpt")?;
    ensure(bytes == read("b/student.ckpt")?, "student checkpoints differ between identical runs")?;

    let ck = Checkpoint::load(&root.join("a/student.ckpt")).map_err(|e| e.to_string())?;
    ensure(ck.to_bytes().map_err(|e| e.to_string())? == bytes, "load then serialise changes bytes")?;
    ck.save(&root.join("resaved.ckpt")).map_err(|e| e.to_string())?;
    ensure(read("resaved.ckpt")? == bytes, "save/load/save is not byte-identical")?;
    let resumed = DistillTrainer::from_checkpoint(&ck).map_err(|e| e.to_string())?;
    ensure(
        resumed.checkpoint().to_bytes().map_err(|e| e.to_string())? == bytes,
        "trainer state does not round-trip",
    )?;
    let lines = ma.iter().filter(|&&c| c == b'\n').count();
    Ok(format!(
        "two seeded runs: identical metrics.jsonl ({lines} lines) and checkpoints; save/load/save byte-identical ({} bytes)",
        bytes.len()
    ))
}

// ---------------------------------------------------------------------------
// 10: content preservation

fn c10_content() -> Outcome {
    let tr = trained();
    let row = tr.table.row(AblationMode::Inverse).unwrap();
    let s = &row.per_seed[0];
    let below = s.below_margin.ok_or("no content errors")?;
    let detail = format!(
        "mean content error {:.4}, margin {:.4}, share below margin {:.3} over {} pairs",
        s.content_preservation.unwrap_or(f64::NAN),
        s.content_margin.unwrap_or(f64::NAN),
        below,
        s.pairs.len()
    );
    ensure(below >= 0.9, format!("under 90% of pairs below margin: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "diffusion kernels match scalar oracle", Box::new(c1_kernels)),
        (2, "loss gradients and teacher stop-gradient", Box::new(c2_gradients)),
        (3, "objective weights and inverse sign", Box::new(c3_objective)),
        (4, "conditioning invariants", Box::new(|| c4_conditioning(desk()))),
        (5, "conversion distillation avoids source collapse", Box::new(c5_collapse)),
        (6, "component ablation ordering", Box::new(c6_components)),
        (7, "adcd beats direct distillation", Box::new(c7_methods)),
        (8, "real-time factor harness", Box::new(c8_rtf)),
        (9, "seeded runs reproduce; checkpoints round-trip", Box::new(c9_reproducible)),
        (10, "content preservation below margin", Box::new(c10_content)),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut lines = Vec::new();
    for (id, name, f) in &criteria {
        if !wanted.is_empty() && !wanted.contains(id) {
            continue;
        }
        let t0 = Instant::now();
        let res = match catch_unwind(AssertUnwindSafe(|| f())) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t0.elapsed().as_secs_f64();
        let line = match &res {
            Ok(d) => format!("PASS criterion {id:>2} {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                format!("FAIL criterion {id:>2} {name}: {d} [{secs:.1} s]")
            }
        };
        println!("{line}");
        lines.push(line);
    }
    let summary = format!("acceptance: {} run, {failed} failed", lines.len());
    println!("{summary}");
    lines.push(summary);
    let _ = fs::write(out_dir().join("summary.txt"), lines.join("\n") + "\n");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
