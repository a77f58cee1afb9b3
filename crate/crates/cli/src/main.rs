use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use lbdt_core::flops::{bench_attention, count_flops, BenchRow};
use lbdt_core::harness::ablation::{ensure_dataset, grid, run_ablation, tsv_header, write_table};
use lbdt_core::harness::attention::{concentration, dump_sample, DEFAULT_STAGE};
use lbdt_core::harness::config::{json_escape, KEYS};
use lbdt_core::harness::eval::{score_dirs, write_predictions};
use lbdt_core::harness::gradsuite::run_suite;
use lbdt_core::harness::train::{BEST_CHECKPOINT, LAST_CHECKPOINT};
use lbdt_core::harness::{evaluate, load_splits, Checkpoint, EpochLog, RunConfig, Trainer};
use lbdt_core::metrics::{Mask, Overlap};
use lbdt_core::model::Model;
use lbdt_core::synth::build_split;
use lbdt_core::{Error, Result};

const GRADCHECK_SEED: u64 = 7;

fn with_config(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help("key = value file applied before flag overrides"),
    );
    for key in KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(key)
                .alias(key.replace('_', "-"))
                .value_name("VALUE")
                .help_heading("Config overrides"),
        );
    }
    cmd
}

fn split_arg() -> Arg {
    Arg::new("split")
        .long("split")
        .value_parser(["train", "val"])
        .default_value("val")
}

fn format_arg() -> Arg {
    Arg::new("format")
        .long("format")
        .value_parser(["tsv", "json"])
        .default_value("tsv")
}

fn cli() -> Command {
    Command::new("lbdt")
        .about("Language-bridged duplex transfer for referring video object segmentation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config(
            Command::new("gen-data").about("Render the synthetic moving-shapes dataset into data_dir"),
        ))
        .subcommand(with_config(
            Command::new("train")
                .about("Train, writing checkpoints and the epoch log into out_dir")
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .help("continue from out_dir/last.ckpt"),
                ),
        ))
        .subcommand(with_config(
            Command::new("eval")
                .about("Score a checkpoint on a split, or prediction files against ground truth")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_parser(value_parser!(PathBuf))
                        .conflicts_with("pred-dir"),
                )
                .arg(
                    Arg::new("pred-dir")
                        .long("pred-dir")
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("gt-dir")
                        .long("gt-dir")
                        .value_parser(value_parser!(PathBuf))
                        .requires("pred-dir"),
                )
                .arg(split_arg())
                .arg(
                    Arg::new("pgm")
                        .long("pgm")
                        .action(ArgAction::SetTrue)
                        .help("also export predicted masks as PGM images"),
                ),
        ))
        .subcommand(with_config(
            Command::new("ablate").about("Train and evaluate a configuration grid").arg(
                Arg::new("grid")
                    .long("grid")
                    .value_parser(["components", "informative", "delta", "stages", "all"])
                    .default_value("informative"),
            ),
        ))
        .subcommand(with_config(
            Command::new("gradcheck").about("Finite-difference check of every op and block"),
        ))
        .subcommand(with_config(
            Command::new("flops")
                .about("FLOP ledger of the configured model")
                .arg(
                    Arg::new("words")
                        .long("words")
                        .value_parser(value_parser!(usize))
                        .default_value("3"),
                )
                .arg(format_arg()),
        ))
        .subcommand(with_config(
            Command::new("bench")
                .about("Wall-clock timing of bridged versus direct attention")
                .arg(
                    Arg::new("reps")
                        .long("reps")
                        .value_parser(value_parser!(usize))
                        .default_value("10"),
                )
                .arg(
                    Arg::new("words")
                        .long("words")
                        .value_parser(value_parser!(usize))
                        .default_value("10"),
                )
                .arg(
                    Arg::new("sides")
                        .long("sides")
                        .value_delimiter(',')
                        .value_parser(value_parser!(usize))
                        .default_value("8,16,32")
                        .help("square feature-map sides to time"),
                )
                .arg(format_arg()),
        ))
        .subcommand(with_config(
            Command::new("dump-attn")
                .about("Write word-over-temporal attention maps and the motion-word concentration")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("stage")
                        .long("stage")
                        .value_parser(value_parser!(usize))
                        .default_value(DEFAULT_STAGE.to_string()),
                )
                .arg(split_arg()),
        ))
}

/// Applies `--config` then every `--key=value` flag on top of `base`.
fn overrides(mut cfg: RunConfig, m: &ArgMatches) -> Result<RunConfig> {
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn epoch_line(prefix: &str, epochs: usize, log: &EpochLog) {
    eprintln!(
        "{prefix}epoch {:>2}/{epochs} lr {:.3e} loss {:.4} val mIoU {:.4} oIoU {:.4} AP {:.4}",
        log.epoch, log.lr, log.train_loss, log.val.mean_iou, log.val.overall_iou, log.val.ap
    );
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = overrides(RunConfig::default(), m)?;
    let entries = build_split(cfg.samples, cfg.data_seed, &cfg.synth_config(), &cfg.data_dir)?;
    println!("wrote {} samples to {}", entries.len(), cfg.data_dir.display());
    Ok(())
}

fn train_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = overrides(RunConfig::default(), m)?;
    let mut trainer = if m.get_flag("resume") {
        let state = Checkpoint::load(&cfg.out_dir.join(LAST_CHECKPOINT))?;
        let mut state_cfg = overrides(state.config.clone(), m)?;
        state_cfg.out_dir = cfg.out_dir.clone();
        let (train, val, vocab) = load_splits(&state_cfg)?;
        let mut state = state;
        state.config = state_cfg;
        Trainer::resume(state, train, val, vocab.len())?
    } else {
        let (train, val, vocab) = load_splits(&cfg)?;
        Trainer::new(&cfg, train, val, vocab.len())?
    };
    let epochs = trainer.config().epochs;
    let out_dir = trainer.config().out_dir.clone();
    let outcome = trainer.fit(&out_dir, |log| epoch_line("", epochs, log))?;
    match outcome.best_report {
        Some(r) => println!("{}", r.to_json()),
        None => eprintln!("no epochs left to train"),
    }
    Ok(())
}

fn eval_cmd(m: &ArgMatches) -> Result<()> {
    if let Some(pred) = m.get_one::<PathBuf>("pred-dir") {
        let cfg = overrides(RunConfig::default(), m)?;
        let gt = m.get_one::<PathBuf>("gt-dir").unwrap_or(&cfg.data_dir);
        let (report, n) = score_dirs(pred, gt)?;
        eprintln!("scored {n} masks");
        println!("{}", report.to_json());
        return Ok(());
    }
    let base = overrides(RunConfig::default(), m)?;
    let path = m
        .get_one::<PathBuf>("checkpoint")
        .cloned()
        .unwrap_or_else(|| base.out_dir.join(BEST_CHECKPOINT));
    let state = Checkpoint::load(&path)?;
    let cfg = overrides(state.config.clone(), m)?;
    let (train, val, vocab) = load_splits(&cfg)?;
    let split = m.get_one::<String>("split").expect("defaulted");
    let samples = if split == "train" { train } else { val };
    let model = Model::new(cfg.model_config(vocab.len())?)?;
    let (report, masks) = evaluate(&model, &state.params, &samples)?;
    let stems: Vec<String> = samples.iter().map(|s| s.entry.stem.clone()).collect();
    let mut tsv = String::from("stem\texpression\tiou\n");
    for (s, pred) in samples.iter().zip(&masks) {
        let o = Overlap::of(pred, &Mask::from_tensor(&s.mask)?)?;
        tsv.push_str(&format!("{}\t{}\t{:.6}\n", s.entry.stem, s.entry.expression, o.iou()));
    }
    write_file(&cfg.out_dir.join(format!("eval_{split}_per_sample.tsv")), &tsv)?;
    write_predictions(&cfg.out_dir.join(format!("pred_{split}")), &stems, &masks, m.get_flag("pgm"))?;
    write_file(
        &cfg.out_dir.join(format!("eval_{split}.json")),
        &format!(
            "{{\"checkpoint\": \"{}\", \"split\": \"{split}\", \"report\": {}, \"config\": {}}}\n",
            json_escape(&path.display().to_string()),
            report.to_json(),
            cfg.to_json()
        ),
    )?;
    println!("{}", report.to_json());
    Ok(())
}

fn ablate_cmd(m: &ArgMatches) -> Result<()> {
    let base = overrides(RunConfig::default(), m)?;
    let variants = grid(m.get_one::<String>("grid").expect("defaulted"))?;
    ensure_dataset(&base)?;
    let n = variants.len();
    let mut done = 0;
    let rows = run_ablation(
        &base,
        &variants,
        |name, log| epoch_line(&format!("[{name}] "), base.epochs, log),
        |row| {
            done += 1;
            eprintln!("[{done}/{n}] {} mean IoU {:.4}", row.variant, row.report.mean_iou);
        },
    )?;
    write_table(&rows, &base, &base.out_dir)?;
    println!("{}", tsv_header());
    for r in &rows {
        println!("{}", r.tsv());
    }
    Ok(())
}

fn gradcheck_cmd(m: &ArgMatches) -> Result<bool> {
    overrides(RunConfig::default(), m)?;
    let cases = run_suite(GRADCHECK_SEED)?;
    for c in &cases {
        println!("{}", c.line());
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    println!("{} cases, {failed} failed", cases.len());
    Ok(failed == 0)
}

fn flops_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = overrides(RunConfig::default(), m)?;
    let words = *m.get_one::<usize>("words").expect("defaulted");
    if words == 0 || words > cfg.max_words {
        return Err(Error::Config(format!("--words must be in 1..={}", cfg.max_words)));
    }
    let ledger = count_flops(&cfg.model_config(cfg.vocab_size())?, words);
    if m.get_one::<String>("format").map(String::as_str) == Some("json") {
        println!("{}", ledger.to_json());
    } else {
        print!("{}", ledger.to_tsv());
    }
    Ok(())
}

fn bench_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = overrides(RunConfig::default(), m)?;
    let reps = *m.get_one::<usize>("reps").expect("defaulted");
    let words = *m.get_one::<usize>("words").expect("defaulted");
    let sizes: Vec<_> = m
        .get_many::<usize>("sides")
        .expect("defaulted")
        .map(|&s| (s, s, words, cfg.c_m))
        .collect();
    let rows = bench_attention(&sizes, reps)?;
    if m.get_one::<String>("format").map(String::as_str) == Some("json") {
        let items: Vec<String> = rows.iter().map(BenchRow::to_json).collect();
        println!("[{}]", items.join(", "));
    } else {
        println!("{}", BenchRow::tsv_header());
        for r in &rows {
            println!("{}", r.tsv());
        }
    }
    Ok(())
}

fn dump_attn_cmd(m: &ArgMatches) -> Result<()> {
    let base = overrides(RunConfig::default(), m)?;
    let path = m
        .get_one::<PathBuf>("checkpoint")
        .cloned()
        .unwrap_or_else(|| base.out_dir.join(BEST_CHECKPOINT));
    let state = Checkpoint::load(&path)?;
    let cfg = overrides(state.config.clone(), m)?;
    let stage = *m.get_one::<usize>("stage").expect("defaulted");
    let (train, val, vocab) = load_splits(&cfg)?;
    let split = m.get_one::<String>("split").expect("defaulted");
    let samples = if split == "train" { train } else { val };
    let model = Model::new(cfg.model_config(vocab.len())?)?;
    let dir = cfg.out_dir.join(format!("attn_{split}_s{stage}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    for s in &samples {
        dump_sample(&model, &state.params, s, stage, &dir)?;
    }
    let c = concentration(&model, &state.params, &samples, stage)?;
    let mut tsv = String::from("stem\tmotion_word_mass\n");
    for (stem, mass) in &c.per_sample {
        tsv.push_str(&format!("{stem}\t{mass:.6}\n"));
    }
    write_file(&dir.join("concentration.tsv"), &tsv)?;
    let json = format!(
        "{{\"stage\": {stage}, \"split\": \"{split}\", \"moving_samples\": {}, \"fraction_concentrated\": {:.6}, \"config\": {}}}",
        c.per_sample.len(),
        c.fraction_concentrated,
        cfg.to_json()
    );
    write_file(&dir.join("concentration.json"), &format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

fn dispatch(m: &ArgMatches) -> Result<bool> {
    match m.subcommand() {
        Some(("gen-data", sm)) => gen_data(sm).map(|_| true),
        Some(("train", sm)) => train_cmd(sm).map(|_| true),
        Some(("eval", sm)) => eval_cmd(sm).map(|_| true),
        Some(("ablate", sm)) => ablate_cmd(sm).map(|_| true),
        Some(("gradcheck", sm)) => gradcheck_cmd(sm),
        Some(("flops", sm)) => flops_cmd(sm).map(|_| true),
        Some(("bench", sm)) => bench_cmd(sm).map(|_| true),
        Some(("dump-attn", sm)) => dump_attn_cmd(sm).map(|_| true),
        _ => unreachable!("subcommand_required"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match dispatch(&matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_config_keys() {
        let m = cli()
            .try_get_matches_from(["lbdt", "flops", "--c_m=32", "--insert-stages=3,4"])
            .unwrap();
        let (_, sm) = m.subcommand().unwrap();
        let cfg = overrides(RunConfig::default(), sm).unwrap();
        assert_eq!(cfg.c_m, 32);
        assert_eq!(cfg.insert_stages, vec![3, 4]);
    }
}
