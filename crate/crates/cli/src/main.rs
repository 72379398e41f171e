use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use s2s_core::bundle::{export_model, import_model};
use s2s_core::corpus::{generate_sarcasm_corpus, load_corpus, load_glove, save_corpus};
use s2s_core::evalkit::{build_report, parse_records};
use s2s_core::model::{init_model, reply, DecodeConfig, ModelParams};
use s2s_core::text::{Vocab, DEFAULT_MAX_SEQ_LEN};
use s2s_core::trainer::{perplexity, train, TrainConfig};

/// Train and talk to a small sequence-to-sequence chatbot.
#[derive(Debug, Parser)]
#[command(name = "s2s", version)]
struct Cli {
    /// RNG seed (subcommands that take --seed use it unless overridden)
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus utilities
    Corpus {
        #[command(subcommand)]
        action: CorpusCmd,
    },
    /// Train a model; checkpoints and the final bundle go to --out
    Train(TrainArgs),
    /// Interactive chat. `/temp F` changes temperature, `/quit` exits
    Chat(ChatArgs),
    /// Verify a checkpoint and write it as a standalone bundle
    Export {
        /// Bundle file, or a training directory (its latest checkpoint is used)
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rating-record utilities
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
    },
    /// Teacher-forced perplexity of a corpus under a model
    Perplexity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    /// Generate a synthetic sarcastic exchange corpus as JSONL
    Gen {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        pairs: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Aggregate rating records into category and label percentages
    Aggregate {
        /// Directory of *.json records (or a single record file)
        #[arg(long)]
        records: PathBuf,
        /// Where to write the JSON report
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    hidden: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    embed: u64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = non_negative)]
    lr: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 5.0, value_parser = positive)]
    clip: f64,
    /// GloVe text vectors; dimension must equal --embed
    #[arg(long)]
    glove: Option<PathBuf>,
    /// Single-threaded, bit-reproducible training
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    checkpoint_every: u64,
}

#[derive(Debug, Args)]
struct ChatArgs {
    #[arg(long)]
    model: PathBuf,
    /// Sample at this temperature instead of decoding greedily
    #[arg(long, value_parser = positive)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_SEQ_LEN, value_parser = max_len)]
    max_len: usize,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(_) => Err("must be > 0".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(_) => Err("must be >= 0".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn max_len(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> s2s_core::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Corpus {
            action: CorpusCmd::Gen { pairs, out },
        } => {
            let corpus = generate_sarcasm_corpus(pairs as usize, seed)?;
            save_corpus(&corpus, &out)?;
            println!("wrote {} pairs to {}", corpus.len(), out.display());
        }
        Command::Train(args) => run_train(args, seed)?,
        Command::Chat(args) => run_chat(args, seed)?,
        Command::Export { checkpoint, out } => {
            let path = resolve_checkpoint(&checkpoint)?;
            let (model, vocab) = import_model(&path)?;
            export_model(&model, &vocab, &out)?;
            println!("exported {} to {}", path.display(), out.display());
        }
        Command::Eval {
            action: EvalCmd::Aggregate { records, out },
        } => {
            let records = parse_records(&[records])?;
            let report = build_report(&records)?;
            fs::write(&out, report.to_json() + "\n").map_err(|e| s2s_core::Error::io(&out, e))?;
            print!("{}", report.to_table());
        }
        Command::Perplexity { model, corpus } => {
            let (model, vocab) = import_model(&model)?;
            let corpus = load_corpus(&corpus)?;
            println!("{:.6}", perplexity(&corpus, &vocab, &model)?);
        }
    }
    Ok(())
}

fn run_train(args: TrainArgs, seed: u64) -> s2s_core::Result<()> {
    let cfg = TrainConfig {
        lr: args.lr,
        clip_norm: args.clip,
        epochs: args.epochs,
        batch_size: args.batch as usize,
        seed,
        deterministic: args.deterministic,
        checkpoint_every: args.checkpoint_every as usize,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let corpus = load_corpus(&args.corpus)?;
    let vocab = Vocab::build(&corpus, 1)?;
    let glove = match &args.glove {
        Some(path) => {
            let (table, coverage) = load_glove(path, &vocab, args.embed as usize)?;
            info!("GloVe covers {:.1}% of the vocabulary", coverage * 100.0);
            Some(table)
        }
        None => None,
    };
    let model = init_model(&vocab, args.embed as usize, args.hidden as usize, seed, glove.as_ref())?;
    info!(
        "training {} parameters on {} pairs, vocabulary {}",
        model.param_count(),
        corpus.len(),
        vocab.len()
    );
    let (model, report) = train(&corpus, &vocab, model, &cfg, Some(&args.out))?;
    let final_path = args.out.join("model.bundle");
    export_model(&model, &vocab, &final_path)?;

    if let Some(loss) = report.final_loss() {
        println!("final loss: {loss:.5}");
    }
    if let Some(m) = report.memorization {
        println!("memorization: {:.3}", m);
    }
    if !report.rising_windows.is_empty() {
        println!("warning: loss rose over {} 20-epoch windows", report.rising_windows.len());
    }
    println!("wall time: {:.1}s", report.wall_time_secs);
    println!("model: {}", final_path.display());
    Ok(())
}

/// A bundle path as given, or the checkpoint named by `dir/latest`.
fn resolve_checkpoint(path: &Path) -> s2s_core::Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join("latest");
    let name = fs::read_to_string(&latest).map_err(|e| s2s_core::Error::io(&latest, e))?;
    Ok(path.join(name.trim()))
}

fn run_chat(args: ChatArgs, seed: u64) -> s2s_core::Result<()> {
    let (model, vocab) = import_model(&args.model)?;
    let mut temperature = args.temperature;
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    let mut turn = 0u64;
    eprintln!("type a message, /temp F to change temperature, /quit to exit");
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| s2s_core::Error::io("<stdin>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        if let Some(rest) = line.strip_prefix("/temp") {
            match positive(rest.trim()) {
                Ok(t) => {
                    temperature = Some(t);
                    eprintln!("temperature set to {t}");
                }
                Err(e) => eprintln!("invalid temperature: {e}"),
            }
            continue;
        }
        let text = respond(line, &model, &vocab, temperature, args.max_len, seed.wrapping_add(turn))?;
        writeln!(stdout, "{text}").map_err(|e| s2s_core::Error::io("<stdout>", e))?;
        stdout.flush().map_err(|e| s2s_core::Error::io("<stdout>", e))?;
        turn += 1;
    }
    Ok(())
}

fn respond(
    line: &str,
    model: &ModelParams,
    vocab: &Vocab,
    temperature: Option<f64>,
    max_len: usize,
    seed: u64,
) -> s2s_core::Result<String> {
    let cfg = match temperature {
        Some(t) => DecodeConfig::sample(t, max_len, seed),
        None => DecodeConfig::greedy(max_len),
    };
    reply(line, model, vocab, &cfg)
}
