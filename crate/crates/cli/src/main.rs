use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowagg_core::pipeline::{self, Mode, PipelineError, RunConfig};
use flowagg_core::{AggregationPolicy, UncertaintyKind};
use serde::Serialize;

/// Streaming uncertainty for video segmentation by flow-guided temporal aggregation.
#[derive(Parser)]
#[command(name = "flowagg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to tensor files plus a manifest.
    Simulate {
        /// JSON document with `scene` and `noise`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce per-frame predictions and uncertainty maps.
    Aggregate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score aggregated outputs against the manifest's labels.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of `aggregate`.
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// JSON report path; PR points go to the same path with a .csv extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time MC sampling against ta and rta.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Limit the number of timed frames.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mc,
    Ta,
    Rta,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mc => Mode::Mc,
            ModeArg::Ta => Mode::Ta,
            ModeArg::Rta => Mode::Rta,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum KindArg {
    Entropy,
    Varratio,
    Bald,
    Meanstd,
    All,
}

#[derive(Args)]
struct RunArgs {
    /// Run config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha_acc: Option<f64>,
    #[arg(long)]
    alpha_err: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Use alpha = 1/t in ta mode.
    #[arg(long)]
    cumulative: bool,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    uncertainty: Vec<KindArg>,
    /// Noise seed of a synthetic model.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sample_delay_ms: Option<u64>,
    #[arg(long)]
    flow_delay_ms: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.cumulative {
            cfg.policy = AggregationPolicy {
                kind: flowagg_core::PolicyKind::CumulativeAverage,
                ..cfg.policy
            };
        }
        let p = &mut cfg.policy;
        for (slot, v) in [
            (&mut p.alpha, self.alpha),
            (&mut p.alpha_acc, self.alpha_acc),
            (&mut p.alpha_err, self.alpha_err),
            (&mut p.lambda, self.lambda),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(n) = self.mc_samples {
            cfg.mc_samples = n;
        }
        if !self.uncertainty.is_empty() {
            cfg.kinds = if self.uncertainty.contains(&KindArg::All) {
                UncertaintyKind::ALL.to_vec()
            } else {
                let mut kinds: Vec<UncertaintyKind> = self
                    .uncertainty
                    .iter()
                    .map(|k| match k {
                        KindArg::Entropy => UncertaintyKind::Entropy,
                        KindArg::Varratio => UncertaintyKind::VariationRatio,
                        KindArg::Bald => UncertaintyKind::Bald,
                        KindArg::Meanstd | KindArg::All => UncertaintyKind::MeanStd,
                    })
                    .collect();
                kinds.sort();
                kinds.dedup();
                kinds
            };
        }
        cfg.seed = self.seed.or(cfg.seed);
        if let Some(d) = self.sample_delay_ms {
            cfg.sample_delay_ms = d;
        }
        if let Some(d) = self.flow_delay_ms {
            cfg.flow_delay_ms = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let manifest = pipeline::cmd_simulate(&config, &out, seed)?;
            println!("{}", manifest.display());
        }
        Command::Aggregate {
            manifest,
            mode,
            run,
            out,
        } => {
            let summary = pipeline::cmd_aggregate(&manifest, &run.resolve()?, mode.into(), &out)?;
            print_json(&summary);
        }
        Command::Evaluate {
            manifest,
            predictions,
            run,
            out,
        } => {
            let report = pipeline::cmd_evaluate(&manifest, &predictions, &run.resolve()?, &out)?;
            println!(
                "mean_iou {:.4} global_avg {:.4} class_avg {:.4}",
                report.seg.mean_iou, report.seg.global_avg, report.seg.class_avg
            );
            for k in &report.kinds {
                let tau = k
                    .ranking
                    .kendall_tau
                    .map_or_else(|| "null".to_string(), |t| format!("{t:.4}"));
                println!("{:<9} kendall_tau {tau}", k.kind.as_str());
            }
        }
        Command::Bench {
            manifest,
            run,
            frames,
            out,
        } => {
            let mut cfg = run.resolve()?;
            if frames.is_some() {
                cfg.bench_frames = frames;
            }
            let n = cfg.mc_samples;
            let report = pipeline::cmd_bench(&manifest, &cfg, n, out.as_deref())?;
            print!("{}", report.csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
