use std::path::PathBuf;
use std::process::ExitCode;

use acdit::cli::{
    cmd_flops, cmd_gen_data, cmd_ingest, cmd_mask_dump, cmd_sample, cmd_train, FlopsRequest, GenDataRequest,
    RunConfig, SampleRequest, SyntheticKind, Weights,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "acdit", version, about = "Blockwise autoregressive conditional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        /// Comma-separated class labels.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<usize>,
        /// Samples per label.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        /// Use the live parameters instead of the EMA copy.
        #[arg(long)]
        live: bool,
    },
    /// Print the training attention mask for N blocks of B tokens.
    MaskDump { n: usize, b: usize },
    /// Print the analytic cost curve as CSV (a multiply-accumulate counts as 2 FLOPs).
    Flops {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        /// Comma-separated block sizes; every divisor of each length when omitted.
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<usize>,
        #[arg(long)]
        hidden: usize,
        #[arg(long)]
        heads: usize,
        /// Parameters per layer; 12·hidden² when omitted.
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Write a synthetic dataset as a latent container.
    GenData {
        #[arg(long, value_enum, default_value_t = Kind::Blobs)]
        kind: Kind,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Comma-separated grid extents.
        #[arg(long, value_delimiter = ',', default_value = "16,16")]
        grid: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read and summarize a latent container.
    Ingest { path: PathBuf },
    /// Print the default run config.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Blobs,
    Gradients,
    Video,
}

fn run(cli: Cli) -> acdit::Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let s = cmd_train(&cfg, resume.as_deref())?;
            if let Some(l) = s.losses.last() {
                println!("step {} loss {l:.5}", s.steps);
            }
            println!("checkpoint {}", s.checkpoint.display());
            println!("metrics {}", s.metrics.display());
        }
        Command::Sample { checkpoint, labels, count, seed, out, live } => {
            let weights = if live { Weights::Live } else { Weights::Ema };
            let req = SampleRequest { checkpoint, labels, count, seed, out_dir: out, weights };
            for p in cmd_sample(&req)? {
                println!("{}", p.display());
            }
        }
        Command::MaskDump { n, b } => print!("{}", cmd_mask_dump(n, b)?),
        Command::Flops { lengths, blocks, hidden, heads, theta } => {
            print!("{}", cmd_flops(&FlopsRequest { lengths, blocks, hidden, heads, theta })?)
        }
        Command::GenData { kind, classes, grid, count, seed, out } => {
            let kind = match kind {
                Kind::Blobs => SyntheticKind::Blobs,
                Kind::Gradients => SyntheticKind::Gradients,
                Kind::Video => SyntheticKind::Video,
            };
            let set = cmd_gen_data(&GenDataRequest { kind, classes, grid, count, seed, out: out.clone() })?;
            println!("{} items of {:?} -> {}", set.len(), set.item_shape(), out.display());
        }
        Command::Ingest { path } => print!("{}", cmd_ingest(&path)?.1),
        Command::Config => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
