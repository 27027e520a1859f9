use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use iffnet::fbank::{compute_fbank, read_waveform, FbankConfig, FeatureTriple};
use iffnet::gradcheck::{standard_suite, NetCheckShape};
use iffnet::io::{load_tensor, save_tensor, write_csv, write_pgm};
use iffnet::kv::KvMap;
use iffnet::model::{load_checkpoint, IffNet};
use iffnet::sim::{gen_dataset, load_dataset};
use iffnet::train::{evaluate, split_datasets, train, TrainConfig};
use iffnet::Tensor;

/// Two-branch interactive feature fusion: simulate, train, evaluate, inspect.
#[derive(Parser)]
#[command(name = "iffnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of (clean, noisy, enhanced) triples.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of triples.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Train from scratch; writes a checkpoint and metrics.tsv into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        lr_peak: Option<f64>,
        /// Print every n-th step to stderr (0 disables).
        #[arg(long, default_value_t = 100)]
        report_every: usize,
    },
    /// Report reconstruction errors of a checkpoint on held-out triples.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the held-out split of the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the full network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Fail when any error reaches this bound.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Fuse an enhanced/noisy pair; writes fused.ift and mask.ift into --out.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Enhanced input: IFT1 feature, .wav or raw f32 waveform.
        #[arg(long)]
        enhanced: PathBuf,
        /// Noisy input, same formats.
        #[arg(long)]
        noisy: PathBuf,
    },
    /// Write PGM and CSV panels for one item: x_e, X_E_in, X_N_in, M, X_F.
    ExportPanels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; a simulated item from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

/// Flags shared by every command. Precedence: defaults < --config < flags.
#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    /// Use `inf` for a noise-free noisy feature.
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    suppress_frac: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk();
        if let Some(path) = &self.config {
            cfg.apply_kv(&KvMap::read(path)?)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.sim.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(b) = self.blocks {
            cfg.arch.blocks = b;
        }
        if let Some(c) = self.filters {
            cfg.arch.filters = c;
        }
        if let Some(s) = self.snr_db {
            cfg.sim.snr_db = s;
        }
        if let Some(s) = self.suppress_frac {
            cfg.sim.suppress_frac = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("--out is required for this command")
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, n } => {
            let cfg = common.config()?;
            let out = common.out()?;
            gen_dataset(&cfg.sim, n, out)?;
            println!("wrote {n} triples to {}", out.display());
        }
        Command::Train {
            common,
            data,
            batch_size,
            warmup,
            lr_peak,
            report_every,
        } => {
            let mut cfg = common.config()?;
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(w) = warmup {
                cfg.warmup_steps = w;
            }
            if let Some(lr) = lr_peak {
                cfg.lr_peak = lr;
            }
            cfg.validate()?;
            let out = common.out()?;
            let (items, held_out) = match &data {
                Some(dir) => (load_dataset(dir)?.0, Vec::new()),
                None => split_datasets(&cfg)?,
            };
            let start = Instant::now();
            let outcome = train(&cfg, &items, |m| {
                if report_every > 0 && m.step % report_every == 0 {
                    eprintln!(
                        "step {:>6}  lr {:.3e}  loss {:.5}  mse_fused {:.5}  ({:.0}s)",
                        m.step,
                        m.lr,
                        m.loss,
                        m.mse_fused,
                        start.elapsed().as_secs_f64()
                    );
                }
            })?;
            outcome.save(out, &cfg)?;
            println!("checkpoint written to {}", out.display());
            if !held_out.is_empty() {
                print_eval(&outcome.model, &held_out)?;
            }
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let (model, _) = load_checkpoint::<f32>(&checkpoint)?;
            let items = match &data {
                Some(dir) => load_dataset(dir)?.0,
                None => split_datasets(&common.config()?)?.1,
            };
            print_eval(&model, &items)?;
        }
        Command::Gradcheck { common, tolerance } => {
            let cfg = common.config()?;
            let entries = standard_suite(cfg.seed, &[NetCheckShape::SMALL, NetCheckShape::LARGE])?;
            let mut worst = 0.0f64;
            for e in &entries {
                println!(
                    "{:<40} {:.3e}  ({} elements)",
                    e.name, e.max_rel_error, e.checked_elements
                );
                worst = worst.max(e.max_rel_error);
            }
            println!("max relative error {worst:.3e}");
            if !(worst < tolerance) {
                bail!("gradient check failed: {worst:.3e} >= {tolerance:.0e}");
            }
        }
        Command::Fuse {
            common,
            checkpoint,
            enhanced,
            noisy,
        } => {
            let out = common.out()?;
            let (model, _) = load_checkpoint::<f32>(&checkpoint)?;
            let x_e = read_feature(&enhanced)?;
            let x_n = read_feature(&noisy)?;
            if x_e.shape() != x_n.shape() {
                bail!(
                    "enhanced {:?} and noisy {:?} features differ in shape",
                    x_e.shape(),
                    x_n.shape()
                );
            }
            let fusion = model.fuse(&x_e, &x_n)?;
            create_dir(out)?;
            let squeeze = |t: &Tensor<f32>| t.reshape(x_e.shape());
            save_tensor(&squeeze(&fusion.fused)?, &out.join("fused.ift"))?;
            save_tensor(&squeeze(&fusion.mask)?, &out.join("mask.ift"))?;
            println!("wrote fused.ift and mask.ift to {}", out.display());
        }
        Command::ExportPanels {
            common,
            checkpoint,
            data,
            index,
        } => {
            let out = common.out()?;
            let (model, _) = load_checkpoint::<f32>(&checkpoint)?;
            let triple = match &data {
                Some(dir) => {
                    let items = load_dataset(dir)?.0;
                    let n = items.len();
                    items
                        .into_iter()
                        .nth(index)
                        .with_context(|| format!("index {index} out of range for {n} items"))?
                }
                None => {
                    let cfg = common.config()?;
                    iffnet::sim::gen_items(&cfg.sim, index + 1)?.pop().unwrap()
                }
            };
            export_panels(&model, &triple, out)?;
            println!("wrote 5 panels to {}", out.display());
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn print_eval(model: &IffNet<f32>, items: &[FeatureTriple]) -> Result<()> {
    let m = evaluate(model, items)?;
    println!("items={}", items.len());
    println!("mse_fused={}", m.mse_fused);
    println!("mse_enh_input={}", m.mse_enh_input);
    println!("mse_noisy_input={}", m.mse_noisy_input);
    Ok(())
}

/// IFT1 features load directly; anything else is read as a waveform.
fn read_feature(path: &Path) -> Result<Tensor<f32>> {
    if path.extension().is_some_and(|e| e == "ift") {
        return Ok(load_tensor(path)?);
    }
    let cfg = FbankConfig::default();
    let wave = read_waveform(path, &cfg)?;
    compute_fbank(&wave, &cfg).with_context(|| format!("{}", path.display()))
}

fn export_panels(model: &IffNet<f32>, triple: &FeatureTriple, out: &Path) -> Result<()> {
    let fusion = model.fuse(&triple.enhanced, &triple.noisy)?;
    let (t, f) = triple.dims();
    create_dir(out)?;
    let panels = [
        ("a_enhanced", triple.enhanced.clone()),
        ("b_enhanced_interacted", fusion.x_e_in.reshape(&[t, f])?),
        ("c_noisy_interacted", fusion.x_n_in.reshape(&[t, f])?),
        ("d_mask", fusion.mask.reshape(&[t, f])?),
        ("e_fused", fusion.fused.reshape(&[t, f])?),
    ];
    for (name, panel) in &panels {
        write_pgm(panel, &out.join(format!("{name}.pgm")))?;
        write_csv(panel, &out.join(format!("{name}.csv")))?;
    }
    Ok(())
}
