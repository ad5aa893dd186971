//! `vcdistill` command-line driver.

mod commands;
mod settings;

use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use vcdistill::Result;

fn out_arg() -> Arg {
    Arg::new("out")
        .long("out")
        .value_name("DIR")
        .required(true)
        .help("Run directory for the config snapshot, metrics and outputs")
}

fn config_arg() -> Arg {
    Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("key = value file; flags override it")
}

fn corpus_arg(required: bool) -> Arg {
    Arg::new("corpus")
        .long("corpus")
        .value_name("DIR")
        .required(required)
        .help("Output directory of gen-corpus")
}

fn cli() -> Command {
    let train = commands::train_section();
    let gen = Command::new("gen-corpus")
        .about("Generate the synthetic corpus (or import WAVs) and split it")
        .arg(out_arg())
        .arg(config_arg())
        .arg(
            Arg::new("wav-manifest")
                .long("wav-manifest")
                .value_name("FILE")
                .help("JSONL manifest of WAV files {path, speaker, content, split}"),
        );
    let gen = commands::mel_section().add_flags(commands::corpus_options_section().add_flags(commands::synthetic_section().add_flags(gen)));

    let teacher = train.add_flags(
        Command::new("train-teacher")
            .about("Train the multi-step teacher")
            .arg(out_arg())
            .arg(config_arg())
            .arg(corpus_arg(true)),
    );
    let distill = train.add_flags(
        Command::new("distill")
            .about("Distill a one-step student from a teacher checkpoint")
            .arg(out_arg())
            .arg(config_arg())
            .arg(corpus_arg(true))
            .arg(Arg::new("teacher").long("teacher").value_name("CKPT").required(true)),
    );
    let convert = commands::mel_section().add_flags(
        Command::new("convert")
            .about("Convert one utterance with a student checkpoint")
            .arg(out_arg())
            .arg(config_arg())
            .arg(Arg::new("ckpt").long("ckpt").value_name("CKPT").required(true))
            .arg(corpus_arg(false))
            .arg(
                Arg::new("split")
                    .long("split")
                    .value_parser(["train", "eval"])
                    .default_value("eval"),
            )
            .arg(
                Arg::new("source")
                    .long("source")
                    .value_name("INDEX")
                    .value_parser(value_parser!(usize))
                    .help("Utterance index within the corpus split"),
            )
            .arg(Arg::new("source-wav").long("source-wav").value_name("WAV"))
            .arg(
                Arg::new("target-speaker")
                    .long("target-speaker")
                    .value_name("ID")
                    .value_parser(value_parser!(usize))
                    .required(true),
            ),
    );
    let bench = Command::new("bench")
        .about("Measure real-time factor; two checkpoints give a speedup table")
        .arg(out_arg())
        .arg(config_arg())
        .arg(
            Arg::new("ckpt")
                .long("ckpt")
                .value_name("CKPT")
                .action(ArgAction::Append)
                .required(true),
        )
        .arg(
            Arg::new("device")
                .long("device")
                .value_parser(["cpu", "accelerator"])
                .default_value("cpu"),
        )
        .arg(Arg::new("repetitions").long("repetitions").value_parser(value_parser!(usize)))
        .arg(Arg::new("warmup").long("warmup").value_parser(value_parser!(usize)))
        .arg(
            Arg::new("frames")
                .long("frames")
                .value_parser(value_parser!(usize))
                .help("Source length in frames (87 frames ~ 1 s at hop 256, 22.05 kHz)"),
        );
    let eval = Command::new("eval")
        .about("Evaluate a student on the unseen split")
        .arg(out_arg())
        .arg(config_arg())
        .arg(Arg::new("ckpt").long("ckpt").value_name("CKPT").required(true))
        .arg(corpus_arg(true))
        .arg(
            Arg::new("judge")
                .long("judge")
                .value_name("COMMAND")
                .help("External metric invoked as `COMMAND <wav>`, printing a number"),
        );
    let ablate = train.add_flags(
        Command::new("ablate")
            .about("Train and evaluate several distillation variants from one teacher")
            .arg(out_arg())
            .arg(config_arg())
            .arg(corpus_arg(true))
            .arg(Arg::new("teacher").long("teacher").value_name("CKPT").required(true))
            .arg(
                Arg::new("modes")
                    .long("modes")
                    .value_name("LIST")
                    .help("Comma-separated: fastvoicegrad+content, +conversion, +reconversion, +inverse, direct(L), adcd(L)"),
            )
            .arg(Arg::new("seeds").long("seeds").value_name("LIST").default_value("0")),
    );

    Command::new("vcdistill")
        .about("One-step diffusion voice conversion: training, conversion, benchmarking, evaluation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("seed")
                .long("seed")
                .global(true)
                .value_parser(value_parser!(u64))
                .help("Seed for every random draw of the run"),
        )
        .subcommands([gen, teacher, distill, convert, bench, eval, ablate])
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("gen-corpus", s)) => commands::gen_corpus(s),
        Some(("train-teacher", s)) => commands::train_teacher(s),
        Some(("distill", s)) => commands::distill(s),
        Some(("convert", s)) => commands::convert(s),
        Some(("bench", s)) => commands::bench(s),
        Some(("eval", s)) => commands::eval(s),
        Some(("ablate", s)) => commands::ablate(s),
        _ => unreachable!("subcommand_required"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            eprintln!("{}", cli().render_usage());
            return ExitCode::from(2);
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
