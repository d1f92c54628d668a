use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ds_mshvit::dual_stream::LossRecord;
use ds_mshvit::harness::dataset::{generate_dataset, Split};
use ds_mshvit::harness::run::{ablate_alpha, ablate_attn_layer, evaluate_checkpoint, train, CHECKPOINT_FILE};
use ds_mshvit::harness::RunConfig;
use ds_mshvit::motion::{encode_flow_image, encode_with_scale, read_dsfl, write_png};

#[derive(Parser)]
#[command(name = "dsvit", version, about = "Dual-stream hybrid vision transformer toolkit")]
struct Cli {
    /// Run configuration (`section.key = value` lines); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (and the dataset seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Dataset root.
    #[arg(long, global = true, default_value = "data")]
    data: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Alpha,
    AttnLayer,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset into --data.
    GenData,
    /// Train a dual-stream model on --data, writing into --out-dir.
    Train,
    /// RGB-only evaluation of a checkpoint.
    Eval {
        /// Defaults to <out-dir>/checkpoint.dsck.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `class,weight` CSV; overrides `eval.weights`.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Fusion-weight or alignment-layer ablation.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Encode a `.dsfl` flow file as a motion PNG.
    EncodeFlow {
        input: PathBuf,
        output: PathBuf,
        /// Fixed encoding scale instead of the per-image maximum.
        #[arg(long)]
        m_max: Option<f64>,
    },
}

type Progress = Box<dyn FnMut(&LossRecord, usize)>;

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn progress(label: String) -> impl FnMut(&LossRecord, usize) {
    let start = Instant::now();
    move |r, total| {
        let step = r.step + 1;
        if step % 25 == 0 || step == total {
            eprintln!(
                "{label}step {step}/{total}  total {:.4}  rgb {:.4}  optical {:.4}  attention {:.5}  [{:.0}s]",
                r.total_loss,
                r.rgb_loss,
                r.optical_loss,
                r.attention_loss,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

fn print_rows(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(&cli)?;
            let size = cfg.model.backbone.input_size.1;
            let m = generate_dataset(&cli.data, &cfg.data, size, cfg.train.seed)?;
            println!("wrote {} samples to {}", m.entries.len(), cli.data.display());
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            let out = train(&cfg, &cli.data, &cli.out_dir, progress(String::new()))?;
            println!(
                "trained {} steps; checkpoint {}",
                out.records.len(),
                out.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            weights,
            split,
        } => {
            let mut cfg = load_config(&cli)?;
            if weights.is_some() {
                cfg.eval.weights = weights.clone();
            }
            let ck = checkpoint.clone().unwrap_or_else(|| cli.out_dir.join(CHECKPOINT_FILE));
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let report = evaluate_checkpoint(&cfg, &ck, &cli.data, split, &cli.out_dir)
                .with_context(|| format!("evaluating {}", ck.display()))?;
            print!("{}", report.to_table());
        }
        Command::Ablate { axis } => {
            let cfg = load_config(&cli)?;
            match axis {
                Axis::Alpha => {
                    ablate_alpha(&cfg, &cli.data, &cli.out_dir, progress(String::new()))?;
                    print_rows(&cli.out_dir.join("ablation_alpha.csv"))?;
                }
                Axis::AttnLayer => {
                    let mut bars: Vec<(String, Progress)> = Vec::new();
                    ablate_attn_layer(&cfg, &cli.data, &cli.out_dir, |name, r, total| {
                        if bars.last().map(|b| b.0.as_str()) != Some(name) {
                            bars.push((name.to_string(), Box::new(progress(format!("[{name}] ")))));
                        }
                        (bars.last_mut().expect("pushed above").1)(r, total);
                    })?;
                    print_rows(&cli.out_dir.join("ablation_attn_layer.csv"))?;
                }
            }
        }
        Command::EncodeFlow { input, output, m_max } => {
            let flow = read_dsfl(input)?;
            let (image, scale) = match m_max {
                Some(m) if *m > 0.0 => (encode_with_scale(&flow, *m)?, *m),
                Some(m) => bail!("--m-max must be positive, got {m}"),
                None => encode_flow_image(&flow)?,
            };
            write_png(output, &image)?;
            println!("{} m_max={scale}", output.display());
        }
    }
    Ok(())
}
