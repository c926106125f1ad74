use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use srlab::cli::{load_spec, run_experiment, verify_lemmas, RunReport};
use srlab::quant::{rtn, sr, QuantGrid, ThresholdSource, ThresholdStream};
use srlab::seed;

#[derive(Parser)]
#[command(name = "srlab", version, about = "Stochastic-rounding training experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a spec file.
    Run { spec: PathBuf },
    /// Run only the statistical probes of a spec file.
    VerifyLemmas { spec: PathBuf },
    /// Quantize one scalar.
    Quantize {
        #[arg(allow_negative_numbers = true)]
        x: f64,
        /// `u:<step>`, `E<e>M<m>` or `id`.
        #[arg(long)]
        grid: QuantGrid,
        #[arg(long, value_enum, default_value = "rtn")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Threshold source for sr: prng or lfsr6.
        #[arg(long, default_value = "prng")]
        source: String,
        /// Number of sr draws to print.
        #[arg(long, default_value_t = 1)]
        draws: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rtn,
    Sr,
}

fn report(r: &RunReport) -> ExitCode {
    for c in &r.cells {
        let tail = c.tail().map_or("-".to_string(), |t| format!("{:.4e} ± {:.1e}", t.0, t.1));
        eprintln!(
            "cell {:>4}  {:<8} {:<10} b={:<5} lr={:<8} seed={:<4} tail={tail}  {}",
            c.cell.index,
            c.cell.mode.to_string(),
            c.cell.format.to_string(),
            c.cell.batch_size,
            c.cell.learning_rate,
            c.cell.seed,
            c.status
        );
    }
    for l in &r.lemmas {
        let verdict = match l.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "info",
        };
        eprintln!("{verdict}  {:<24} {:<28} value={:e} ref={:e}", l.probe, l.parameter, l.value, l.reference);
    }
    eprintln!("wrote {}", r.output.display());
    ExitCode::from(r.exit_code() as u8)
}

fn quantize(x: f64, grid: QuantGrid, mode: Mode, seed_value: u64, source: &str, draws: usize) -> srlab::Result<()> {
    match mode {
        Mode::Rtn => println!("{}", rtn(x, &grid)?),
        Mode::Sr => {
            let kind: srlab::quant::SourceKind = source.parse()?;
            let src: ThresholdSource = kind.from_key(seed::derive(seed_value, &[]));
            let mut stream = ThresholdStream::new(src)?;
            for _ in 0..draws.max(1) {
                println!("{}", sr(x, &grid, &mut stream)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let spec = |path: &PathBuf| {
        load_spec(path).map_err(|e| {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(2)
        })
    };
    match args.command {
        Command::Run { spec: path } => match spec(&path) {
            Ok(s) => match run_experiment(&s) {
                Ok(r) => report(&r),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            },
            Err(code) => code,
        },
        Command::VerifyLemmas { spec: path } => match spec(&path) {
            Ok(s) => match verify_lemmas(&s) {
                Ok(r) => report(&r),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            },
            Err(code) => code,
        },
        Command::Quantize {
            x,
            grid,
            mode,
            seed,
            source,
            draws,
        } => match quantize(x, grid, mode, seed, &source, draws) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
