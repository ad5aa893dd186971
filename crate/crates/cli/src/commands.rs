//! Subcommand bodies. Each writes only below its `--out` directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use ndarray::{ArrayD, Axis};
use vcdistill::data::{
    generate_synthetic_corpus, load_corpus, read_manifest, save_corpus, split_unseen, wav_to_logmel, write_wav, Corpus,
    MelConfig, Normalizer, Split, SyntheticConfig, SyntheticRegistry, UtteranceRecord,
};
use vcdistill::distill::{
    speaker_table, Checkpoint, DistillTrainer, JsonlMetrics, MetricsSink, StepRecord, Teacher, TeacherTrainer,
    TrainConfig, TrainData, TrainMode,
};
use vcdistill::eval::{
    content_preservation_error, embedding_cosine, evaluate_conversions, reference_embeddings, run_ablation_with,
    AblationMode, AblationSetup, ExternalJudge,
};
use vcdistill::inference::{compare_models_rtf, convert_one_step, measure_rtf, ConversionRequest, Device, OneStepModel, RtfOptions};
use vcdistill::io::write_array;
use vcdistill::networks::speaker::{ConvEmbedderConfig, ConvSpeakerEmbedder};
use vcdistill::networks::vocoder::{SineBankVocoder, Vocoder};
use vcdistill::networks::{SpeakerEmbedder, SpeakerEmbedding};
use vcdistill::{Error, Result, SeededRng, Tensor};

use crate::settings::{parse_ids, read_config_file, resolve_seed, CorpusOptions, Section, Snapshot};

/// Keys a distillation run takes from its teacher unless overridden.
const INHERITED: &[&str] = &[
    "diffusion_steps",
    "beta_start",
    "beta_end",
    "t_prime",
    "crop_frames",
    "n_mels",
    "d_spk",
    "hidden",
    "layers",
    "downsample_stages",
    "kernel",
    "time_dim",
    "d_content",
    "teacher_content_hidden",
    "teacher_content_layers",
    "hop",
    "sample_rate",
];

pub fn train_section() -> Section {
    Section::of("", &TrainConfig::default(), &["seed"])
}

pub fn synthetic_section() -> Section {
    Section::of("", &SyntheticConfig::default(), &[])
}

pub fn corpus_options_section() -> Section {
    Section::of("", &CorpusOptions::default(), &[])
}

pub fn mel_section() -> Section {
    Section::of("mel_", &MelConfig::default(), &[])
}

fn path_arg(m: &ArgMatches, id: &str) -> Result<PathBuf> {
    m.get_one::<String>(id)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("missing --{id}")))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    Checkpoint::load(path)
}

/// Split-level corpus plus the embedder used for conditioning and SECS.
struct CorpusDir {
    train: Corpus,
    eval: Corpus,
    registry: Option<SyntheticRegistry>,
    embedder: Box<dyn SpeakerEmbedder>,
}

fn open_corpus(dir: &Path) -> Result<CorpusDir> {
    if !dir.join("train").is_dir() {
        return Err(Error::Corpus(format!("{} is not a gen-corpus output directory", dir.display())));
    }
    let (train, registry) = load_corpus(&dir.join("train"))?;
    let (eval, _) = load_corpus(&dir.join("eval"))?;
    let embedder: Box<dyn SpeakerEmbedder> = match &registry {
        Some(reg) => Box::new(reg.embedder()),
        None => Box::new(ConvSpeakerEmbedder::from_json(&fs::read_to_string(dir.join("embedder.json"))?)?),
    };
    Ok(CorpusDir {
        train,
        eval,
        registry,
        embedder,
    })
}

fn check_n_mels(corpus: &Corpus, cfg: &TrainConfig) -> Result<()> {
    match corpus.n_mels() {
        Some(m) if m != cfg.n_mels => Err(Error::Config(format!(
            "corpus has {m} mel bins but n_mels = {}",
            cfg.n_mels
        ))),
        _ => Ok(()),
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// The last `len / fraction` ids, at least `min` of them.
fn default_held(ids: impl Iterator<Item = usize>, fraction: usize, min: usize) -> Vec<usize> {
    let ids: Vec<usize> = ids.collect();
    let k = (ids.len() / fraction).max(min).min(ids.len());
    ids[ids.len() - k..].to_vec()
}

pub fn gen_corpus(m: &ArgMatches) -> Result<()> {
    let out = path_arg(m, "out")?;
    let (synth_s, opt_s, mel_s) = (synthetic_section(), corpus_options_section(), mel_section());
    let file = read_config_file(m, &[&synth_s, &opt_s, &mel_s])?;
    let seed = resolve_seed(m, &file, 0)?;
    let opts = opt_s.resolve(CorpusOptions::default(), &file, m)?;
    let mut snap = Snapshot::default();
    snap.push("seed", seed);
    snap.extend("", &opts);
    let mut rng = SeededRng::new(seed);

    let mut log = Vec::new();
    let (train, eval, registry) = if let Some(manifest) = m.get_one::<String>("wav-manifest") {
        let mel = mel_s.resolve(MelConfig::default(), &file, m)?;
        snap.extend("mel_", &mel);
        let (train, eval, embedder, losses) = import_wavs(Path::new(manifest), &mel, &opts, &mut rng)?;
        fs::create_dir_all(&out)?;
        fs::write(out.join("embedder.json"), embedder.to_json()?)?;
        for (i, l) in losses.iter().enumerate() {
            log.push(serde_json::json!({"step": i + 1, "phase": "speaker_embedder", "total": l}));
        }
        (train, eval, None)
    } else {
        let synth = synth_s.resolve(SyntheticConfig::default(), &file, m)?;
        snap.extend("", &synth);
        let (corpus, registry) = generate_synthetic_corpus(&synth, &mut rng)?;
        let held_s = match parse_ids(&opts.held_speakers)? {
            v if v.is_empty() => default_held(corpus.speakers().into_iter(), 5, 2),
            v => v,
        };
        let held_c = match parse_ids(&opts.held_contents)? {
            v if v.is_empty() => default_held(corpus.contents().into_iter(), 4, 1),
            v => v,
        };
        let (train, eval) = split_unseen(&corpus, &held_s, &held_c)?;
        (train, eval, Some(registry))
    };
    for (name, c) in [("train", &train), ("eval", &eval)] {
        log.push(serde_json::json!({
            "split": name,
            "records": c.records.len(),
            "speakers": c.speakers().len(),
            "contents": c.contents().len(),
        }));
    }
    save_corpus(&out.join("train"), &train, registry.as_ref())?;
    save_corpus(&out.join("eval"), &eval, registry.as_ref())?;
    snap.write(&out, "gen-corpus")?;
    write_jsonl(&out.join("metrics.jsonl"), &log)?;
    println!(
        "corpus: {} train / {} eval utterances -> {}",
        train.records.len(),
        eval.records.len(),
        out.display()
    );
    Ok(())
}

/// Builds normalized train/eval corpora from a manifest of WAV files and
/// fits a convolutional speaker embedder on the training split.
fn import_wavs(
    manifest: &Path,
    mel: &MelConfig,
    opts: &CorpusOptions,
    rng: &mut SeededRng,
) -> Result<(Corpus, Corpus, ConvSpeakerEmbedder, Vec<f64>)> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Empty("wav manifest"));
    }
    let mut records = Vec::with_capacity(entries.len());
    for e in &entries {
        let (wave, sr) = vcdistill::data::read_wav(&base.join(&e.path))?;
        let logmel = wav_to_logmel(&wave, sr, mel)?;
        records.push(UtteranceRecord {
            mel: logmel.into_dyn(),
            speaker: e.speaker,
            content: e.content,
            split: e.split,
        });
    }
    let norm = Normalizer::fit(records.iter().filter(|r| r.split == Split::Train).map(|r| &r.mel))?;
    for r in &mut records {
        r.mel = norm.apply(&r.mel);
    }
    let (train, eval): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.split == Split::Train);
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Corpus("manifest needs both train and eval entries".into()));
    }
    let frames = train.iter().map(UtteranceRecord::frames).min().unwrap();
    let crops: Vec<ArrayD<f64>> = train
        .iter()
        .map(|r| vcdistill::data::random_crop(&r.mel, frames, rng))
        .collect();
    let labels: Vec<usize> = train.iter().map(|r| r.speaker).collect();
    let cfg = ConvEmbedderConfig {
        n_mels: mel.n_mels,
        hidden: opts.embedder_hidden,
        layers: opts.embedder_layers,
        d_spk: opts.embedder_d_spk,
    };
    let mut embedder = ConvSpeakerEmbedder::new(&cfg, rng)?;
    let losses = embedder.train(&crops, &labels, opts.embedder_steps, opts.embedder_batch, rng)?;
    embedder.vs.set_trainable(false);
    let corpus = |records| Corpus {
        records,
        normalizer: Some(norm),
    };
    Ok((corpus(train), corpus(eval), embedder, losses))
}

pub fn train_teacher(m: &ArgMatches) -> Result<()> {
    let out = path_arg(m, "out")?;
    let section = train_section();
    let file = read_config_file(m, &[&section])?;
    let mut cfg = section.resolve(TrainConfig::default(), &file, m)?;
    cfg.seed = resolve_seed(m, &file, cfg.seed)?;
    cfg.mode = TrainMode::Teacher;
    cfg.validate()?;
    let corpus = open_corpus(&path_arg(m, "corpus")?)?;
    check_n_mels(&corpus.train, &cfg)?;
    let table = speaker_table(&corpus.train, corpus.embedder.as_ref())?;
    let data = TrainData::new(&corpus.train, table.clone(), cfg.crop_frames)?;

    let mut snap = Snapshot::default();
    snap.extend("", &cfg);
    snap.write(&out, "train-teacher")?;
    let mut trainer = TeacherTrainer::new(&cfg, table, corpus.train.normalizer)?;
    let mut sink = JsonlMetrics::create(&out)?;
    trainer.run(&data, &mut sink)?;
    sink.flush()?;
    trainer.checkpoint().save(&out.join("teacher.ckpt"))?;
    println!("teacher: {} steps -> {}", trainer.step, out.join("teacher.ckpt").display());
    Ok(())
}

/// Distillation config: defaults, then the teacher's architecture and
/// schedule, then the config file, then flags.
fn distill_config(m: &ArgMatches, teacher_cfg: &TrainConfig, section: &Section) -> Result<TrainConfig> {
    let file = read_config_file(m, &[section])?;
    let mut base = TrainConfig::default();
    let inherited: Vec<(String, String)> = vcdistill::distill::config::key_values(teacher_cfg)
        .into_iter()
        .filter(|(k, _)| INHERITED.contains(&k.as_str()))
        .collect();
    base.apply(inherited.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut cfg = section.resolve(base, &file, m)?;
    cfg.seed = resolve_seed(m, &file, cfg.seed)?;
    Ok(cfg)
}

pub fn distill(m: &ArgMatches) -> Result<()> {
    let out = path_arg(m, "out")?;
    let ck = load_checkpoint(&path_arg(m, "teacher")?)?;
    let teacher = Teacher::from_checkpoint(&ck)?;
    let section = train_section();
    let cfg = distill_config(m, &ck.header.config, &section)?;
    if cfg.mode == TrainMode::Teacher {
        return Err(Error::Config("distill needs --mode fastvoicegrad, adcd or direct".into()));
    }
    cfg.validate()?;
    let corpus = open_corpus(&path_arg(m, "corpus")?)?;
    check_n_mels(&corpus.train, &cfg)?;
    let table = speaker_table(&corpus.train, corpus.embedder.as_ref())?;
    let data = TrainData::new(&corpus.train, table.clone(), cfg.crop_frames)?;

    let mut snap = Snapshot::default();
    snap.extend("", &cfg);
    snap.push("teacher", path_arg(m, "teacher")?.display());
    snap.write(&out, "distill")?;
    let mut trainer = DistillTrainer::new(&cfg, &teacher, table, corpus.train.normalizer)?;
    let mut sink = JsonlMetrics::create(&out)?;
    trainer.run(&data, &mut sink)?;
    sink.flush()?;
    let path = out.join("student.ckpt");
    trainer.checkpoint().save(&path)?;
    println!("{}: {} steps -> {}", cfg.mode.name(), trainer.step, path.display());
    Ok(())
}

fn vocode_to_wav(model: &OneStepModel, mel: &ArrayD<f64>, path: &Path) -> Result<()> {
    let logmel = model.normalizer.map_or_else(|| mel.clone(), |n| n.invert(mel));
    let voc = SineBankVocoder::new(model.n_mels(), model.hop, model.sample_rate as f64);
    let wave = voc.vocode(&Tensor::constant(logmel.insert_axis(Axis(0))))?.value().iter().copied().collect::<Vec<f64>>();
    let peak = wave.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let wave: Vec<f64> = if peak > 0.0 {
        wave.iter().map(|v| 0.9 * v / peak).collect()
    } else {
        wave
    };
    write_wav(path, &wave, model.sample_rate)
}

pub fn convert(m: &ArgMatches) -> Result<()> {
    let out = path_arg(m, "out")?;
    let ck_path = path_arg(m, "ckpt")?;
    let model = OneStepModel::from_checkpoint("student", &load_checkpoint(&ck_path)?)?;
    let mel_s = mel_section();
    let file = read_config_file(m, &[&mel_s])?;
    let seed = resolve_seed(m, &file, 0)?;
    let corpus = m.get_one::<String>("corpus").map(|c| open_corpus(Path::new(c))).transpose()?;
    let split = m.get_one::<String>("split").map(String::as_str).unwrap_or("eval");
    let mut snap = Snapshot::default();
    snap.push("seed", seed);
    snap.push("ckpt", ck_path.display());

    let (source, source_speaker, content) = if let Some(wav) = m.get_one::<String>("source-wav") {
        let mut mel = MelConfig {
            n_mels: model.n_mels(),
            ..Default::default()
        };
        mel = mel_s.resolve(mel, &file, m)?;
        snap.extend("mel_", &mel);
        snap.push("source_wav", wav);
        let (wave, sr) = vcdistill::data::read_wav(Path::new(wav))?;
        let logmel = wav_to_logmel(&wave, sr, &mel)?.into_dyn();
        let x = model.normalizer.map_or_else(|| logmel.clone(), |n| n.apply(&logmel));
        (x, None, None)
    } else {
        let c = corpus
            .as_ref()
            .ok_or_else(|| Error::Config("convert needs --source-wav or --corpus with --source".into()))?;
        let idx = *m.get_one::<usize>("source").unwrap_or(&0);
        let split_corpus = if split == "train" { &c.train } else { &c.eval };
        let r = split_corpus
            .records
            .get(idx)
            .ok_or_else(|| Error::Corpus(format!("{split} split has no utterance {idx}")))?;
        snap.push("split", split);
        snap.push("source", idx);
        (r.mel.clone(), Some(r.speaker), Some(r.content))
    };

    let tgt = *m
        .get_one::<usize>("target-speaker")
        .ok_or_else(|| Error::Config("missing --target-speaker".into()))?;
    snap.push("target_speaker", tgt);
    let target: SpeakerEmbedding = match &corpus {
        Some(c) => {
            let pool = if split == "train" { &c.train } else { &c.eval };
            match reference_embeddings(pool, c.embedder.as_ref())?.remove(&tgt) {
                Some(e) => e,
                None => model.embedding(tgt)?.clone(),
            }
        }
        None => model.embedding(tgt)?.clone(),
    };
    snap.write(&out, "convert")?;

    let req = ConversionRequest {
        source,
        target: target.clone(),
        t_prime: model.t_prime,
        seed,
    };
    let converted = convert_one_step(&model, &req)?;
    let mut f = BufWriter::new(fs::File::create(out.join("converted.arr"))?);
    write_array(&mut f, &converted)?;
    f.flush()?;
    vocode_to_wav(&model, &converted, &out.join("converted.wav"))?;

    let mut row = serde_json::json!({"target_speaker": tgt, "source_speaker": source_speaker, "frames": converted.shape()[1]});
    if let Some(c) = &corpus {
        let e = c.embedder.embed(&converted)?;
        row["secs_to_target"] = serde_json::json!(embedding_cosine(&e, &target));
        if let (Some(reg), Some(content)) = (&c.registry, content) {
            row["content_error"] = serde_json::json!(content_preservation_error(&converted, content, reg)?);
        }
    }
    write_jsonl(&out.join("metrics.jsonl"), &[&row])?;
    println!("{row}");
    Ok(())
}

pub fn bench(m: &ArgMatches) -> Result<()> {
    let out = path_arg(m, "out")?;
    let paths: Vec<PathBuf> = m
        .get_many::<String>("ckpt")
        .map(|v| v.map(PathBuf::from).collect())
        .unwrap_or_default();
    if paths.is_empty() || paths.len() > 2 {
        return Err(Error::Config("bench takes one or two --ckpt".into()));
    }
    let device = Device::parse(m.get_one::<String>("device").map(String::as_str).unwrap_or("cpu"))?;
    device.ensure_available()?;
    let file = read_config_file(m, &[])?;
    let opts = RtfOptions {
        repetitions: *m.get_one::<usize>("repetitions").unwrap_or(&30),
        warmup: *m.get_one::<usize>("warmup").unwrap_or(&5),
        device,
        seed: resolve_seed(m, &file, 0)?,
    };
    let frames = *m.get_one::<usize>("frames").unwrap_or(&87);
    let mut models = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("model{i}"));
        let mut model = OneStepModel::from_checkpoint(format!("{i}:{name}"), &load_checkpoint(p)?)?;
        model.device = device;
        models.push(model);
    }
    let mut snap = Snapshot::default();
    for (i, p) in paths.iter().enumerate() {
        snap.push(format!("ckpt_{i}"), p.display());
    }
    snap.extend("", &opts);
    snap.push("frames", frames);
    snap.write(&out, "bench")?;

    let mut rng = SeededRng::new(opts.seed);
    let source = rng.normal_array(&[models[0].n_mels(), frames]).mapv(|v| (0.5 * v).clamp(-1.0, 1.0));
    let target = models[0]
        .speakers
        .values()
        .next()
        .cloned()
        .ok_or_else(|| Error::Conditioning("checkpoint has an empty speaker table".into()))?;
    if models.len() == 1 {
        let report = measure_rtf(&models[0], &source, &target, &opts)?;
        write_jsonl(&out.join("metrics.jsonl"), &[&report])?;
        fs::write(out.join("rtf.json"), serde_json::to_vec_pretty(&report)?)?;
        println!(
            "{} on {}: rtf {:.6} ({} params, {} frames = {:.4} s)",
            report.model,
            report.device.name(),
            report.rtf,
            report.params(),
            report.frames,
            report.playback_seconds
        );
    } else {
        let cmp = compare_models_rtf(&models[0], &models[1], &source, &target, &opts)?;
        write_jsonl(&out.join("metrics.jsonl"), &[&cmp.a, &cmp.b])?;
        fs::write(out.join("rtf.json"), serde_json::to_vec_pretty(&cmp)?)?;
        let table = cmp.table();
        fs::write(out.join("rtf.txt"), &table)?;
        print!("{table}");
    }
    Ok(())
}

pub fn eval(m: &ArgMatches) -> Result<()> {
    let out = path_arg(m, "out")?;
    let ck_path = path_arg(m, "ckpt")?;
    let model = OneStepModel::from_checkpoint("student", &load_checkpoint(&ck_path)?)?;
    let file = read_config_file(m, &[])?;
    let seed = resolve_seed(m, &file, 0)?;
    let corpus = open_corpus(&path_arg(m, "corpus")?)?;
    let judge = m.get_one::<String>("judge").map(|j| ExternalJudge::parse(j)).transpose()?;
    let mut snap = Snapshot::default();
    snap.push("seed", seed);
    snap.push("ckpt", ck_path.display());
    if let Some(j) = m.get_one::<String>("judge") {
        snap.push("judge", j);
    }
    snap.write(&out, "eval")?;

    let summary = evaluate_conversions(&model, &corpus.eval, corpus.embedder.as_ref(), corpus.registry.as_ref(), seed)?;
    fs::write(out.join("pairs.jsonl"), summary.pairs_jsonl()?)?;
    let mut head = serde_json::to_value(&summary)?;
    head.as_object_mut().unwrap().remove("pairs");
    if let Some(judge) = &judge {
        head["judge_mean"] = serde_json::json!(judge_conversions(&model, &corpus, judge, seed, &out)?);
    }
    write_jsonl(&out.join("metrics.jsonl"), &[&head])?;
    fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&head)?)?;
    println!("{head}");
    Ok(())
}

/// Scores one converted utterance per eval record (toward the next eval
/// speaker) with the external judge; returns the mean.
fn judge_conversions(model: &OneStepModel, corpus: &CorpusDir, judge: &ExternalJudge, seed: u64, out: &Path) -> Result<f64> {
    let refs = reference_embeddings(&corpus.eval, corpus.embedder.as_ref())?;
    let speakers: Vec<usize> = refs.keys().copied().collect();
    let dir = out.join("wavs");
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for (i, r) in corpus.eval.records.iter().enumerate() {
        let pos = speakers.iter().position(|&s| s == r.speaker).unwrap();
        let tgt = speakers[(pos + 1) % speakers.len()];
        let req = ConversionRequest {
            source: r.mel.clone(),
            target: refs[&tgt].clone(),
            t_prime: model.t_prime,
            seed: seed.wrapping_add(i as u64),
        };
        let wav = dir.join(format!("{i:04}_{}_to_{tgt}.wav", r.speaker));
        vocode_to_wav(model, &convert_one_step(model, &req)?, &wav)?;
        let score = judge.score(&wav)?;
        rows.push(serde_json::json!({"wav": wav.file_name().unwrap().to_string_lossy(), "score": score}));
    }
    write_jsonl(&out.join("judge.jsonl"), &rows)?;
    Ok(rows.iter().map(|r| r["score"].as_f64().unwrap()).sum::<f64>() / rows.len() as f64)
}

pub fn ablate(m: &ArgMatches) -> Result<()> {
    let out = path_arg(m, "out")?;
    let ck = load_checkpoint(&path_arg(m, "teacher")?)?;
    let teacher = Teacher::from_checkpoint(&ck)?;
    let section = train_section();
    let base = distill_config(m, &ck.header.config, &section)?;
    base.validate()?;
    let modes: Vec<AblationMode> = m
        .get_one::<String>("modes")
        .map(String::as_str)
        .unwrap_or("fastvoicegrad+content,+conversion,+reconversion,+inverse")
        .split(',')
        .map(|s| AblationMode::parse(s.trim()))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = parse_ids(m.get_one::<String>("seeds").map(String::as_str).unwrap_or("0"))?
        .into_iter()
        .map(|s| s as u64)
        .collect();
    let corpus = open_corpus(&path_arg(m, "corpus")?)?;
    check_n_mels(&corpus.train, &base)?;
    let table = speaker_table(&corpus.train, corpus.embedder.as_ref())?;
    let data = TrainData::new(&corpus.train, table, base.crop_frames)?;

    let mut snap = Snapshot::default();
    snap.extend("", &base);
    snap.push("modes", modes.iter().map(AblationMode::label).collect::<Vec<_>>().join(","));
    snap.push("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    snap.write(&out, "ablate")?;

    let setup = AblationSetup {
        teacher: &teacher,
        train: &data,
        eval: &corpus.eval,
        registry: corpus.registry.as_ref(),
        embedder: corpus.embedder.as_ref(),
        base,
        seeds,
    };
    let runs = out.join("runs");
    let all = JsonlMetrics::create(&out)?;
    let shared = std::rc::Rc::new(std::cell::RefCell::new(all));
    let result = run_ablation_with(&modes, &setup, &mut |mode, seed| {
        let dir = runs.join(format!("{}-seed{seed}", sanitize(&mode.label())));
        Ok(Box::new(Tee {
            own: JsonlMetrics::create(&dir)?,
            label: format!("{}/{seed}", mode.label()),
            shared: shared.clone(),
        }) as Box<dyn MetricsSink>)
    })?;
    shared.borrow_mut().flush()?;
    fs::write(out.join("ablation.json"), serde_json::to_vec_pretty(&result)?)?;
    let text = result.text();
    fs::write(out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// Per-run metrics file plus the combined log with run-labelled phases.
struct Tee {
    own: JsonlMetrics,
    label: String,
    shared: std::rc::Rc<std::cell::RefCell<JsonlMetrics>>,
}

impl MetricsSink for Tee {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.own.record(rec)?;
        let mut tagged = rec.clone();
        tagged.phase = format!("{}:{}", self.label, rec.phase);
        self.shared.borrow_mut().record(&tagged)
    }
}
