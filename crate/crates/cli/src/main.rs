use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use synclab::commands::{self, DecodeOptions, RtfOptions};
use synclab::stress::{self, StressMode, StressOptions, StressParams};
use synclab::{CliError, CliResult, EXIT_VALIDATION};

#[derive(Parser)]
#[command(
    name = "synclab",
    version,
    about = "Label-synchronous vs frame-synchronous speech recognition experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test corpus.
    GenCorpus {
        /// Corpus spec (TOML); defaults apply when omitted.
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the model described by an experiment config.
    Train {
        config: PathBuf,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a manifest, write hypotheses and score them.
    Decode {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// LM rescoring coefficient (needs an `[lm]` section).
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        nbest: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare trained models on long, repeated or noisy utterances.
    Stress {
        #[arg(long, value_enum)]
        mode: StressMode,
        /// Comma-separated experiment configs.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Share of the test set used for repetition.
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 4)]
        max_repeat: usize,
        /// Duration bucket edges, in multiples of the mean test utterance.
        #[arg(long, default_value = "5,10,20,40", value_parser = stress::parse_edges)]
        buckets: std::vec::Vec<f64>,
        #[arg(long, default_value_t = 10)]
        per_bucket: usize,
        #[arg(long, default_value_t = 0.0)]
        snr_min: f64,
        #[arg(long, default_value_t = 20.0)]
        snr_max: f64,
    },
    /// Real-time factor of single-threaded decoding.
    BenchRtf {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Utterances decoded first and left out of the totals.
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Training run directory; adds its steps per second to the report.
        #[arg(long)]
        train_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge JSON metric tables into one CSV or JSON table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "comparison")]
        title: String,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenCorpus {
            spec,
            out,
            n_train,
            n_test,
            seed,
        } => {
            let s = commands::gen_corpus(spec.as_deref(), &out, n_train, n_test, seed)?;
            for (name, path, st) in [
                ("train", &s.train_manifest, &s.train),
                ("test", &s.test_manifest, &s.test),
            ] {
                println!(
                    "{name}: {} utterances, {} frames, {:.2} labels/utt, {:.1} frames/utt -> {}",
                    st.utterances,
                    st.frames,
                    st.mean_labels,
                    st.mean_frames,
                    path.display()
                );
            }
        }
        Command::Train { config, resume } => {
            let s = commands::train(&config, resume)?;
            println!(
                "trained {} steps, final loss {:.4} -> {}",
                s.steps,
                s.final_loss,
                s.checkpoint.display()
            );
        }
        Command::Decode {
            config,
            checkpoint,
            manifest,
            gamma,
            nbest,
            out,
        } => {
            let opts = DecodeOptions {
                checkpoint,
                manifest,
                gamma,
                nbest,
                out,
            };
            let s = commands::decode(&config, &opts)?;
            let t = s.score.total;
            println!(
                "error rate {:.2}% (S {} I {} D {} / N {}) -> {}",
                100.0 * t.rate(),
                t.substitutions,
                t.insertions,
                t.deletions,
                t.ref_len,
                s.hypotheses.display()
            );
        }
        Command::Stress {
            mode,
            models,
            manifest,
            out,
            seed,
            fraction,
            max_repeat,
            buckets,
            per_bucket,
            snr_min,
            snr_max,
        } => {
            let opts = StressOptions {
                mode,
                models,
                manifest,
                out,
                params: StressParams {
                    seed,
                    fraction,
                    max_repeat,
                    bucket_edges: buckets,
                    per_bucket,
                    snr_min,
                    snr_max,
                },
            };
            let (rows, path) = stress::stress(&opts)?;
            print!("{}", commands::render_rows(&rows));
            println!("-> {}", path.display());
        }
        Command::BenchRtf {
            config,
            checkpoint,
            manifest,
            warmup,
            train_dir,
            out,
        } => {
            let opts = RtfOptions {
                checkpoint,
                manifest,
                warmup,
                train_dir,
                out,
            };
            let (r, path) = commands::bench_rtf(&config, &opts)?;
            println!(
                "{}: rtf {:.4} ({:.2} s over {:.2} s audio, {} utterances) -> {}",
                r.model,
                r.report.rtf,
                r.report.wall_s,
                r.report.audio_s,
                r.report.n_utts,
                path.display()
            );
            if let Some(s) = r.train_steps_per_s {
                println!("training speed {s:.3} steps/s");
            }
        }
        Command::Report { inputs, out, title } => {
            let table = commands::report(&inputs, &out, &title)?;
            print!("{}", commands::render_rows(&table.rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
