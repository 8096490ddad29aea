use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tortuosity::data::gen_synthetic;
use tortuosity::pipeline::{self, RunConfig};
use tortuosity::{Error, Result};

/// Ordinal tortuosity grading with Vision Transformers.
#[derive(Parser, Debug)]
#[command(name = "tortuosity", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic fiber dataset
    GenSynth(Common),
    /// Train a linear head on frozen features
    Probe(Common),
    /// Fine-tune the whole network
    Finetune(Common),
    /// Evaluate a checkpoint on a manifest
    Eval(Common),
    /// Render a last-layer attention mask for one image
    Attn(Common),
    /// Write class-token features of every manifest image to CSV
    ExportFeatures(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Run configuration (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding `manifest.csv`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Manifest CSV (`path,level`)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to start from or to evaluate
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory or file
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Attention mass kept by the mask
    #[arg(long)]
    mass: Option<f64>,
    /// Input image for `attn`
    #[arg(long)]
    image: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.manifest = Some(d.join("manifest.csv"));
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(c) = &self.ckpt {
            cfg.init = Some(c.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(m) = self.mass {
            cfg.mass = m;
        }
        if let Some(i) = &self.image {
            cfg.image = Some(i.clone());
        }
        Ok(cfg)
    }
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing {what}")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth(c) => {
            let cfg = c.run_config()?;
            let m = gen_synthetic(&cfg.synth, cfg.synth_per_level, &cfg.out)?;
            println!(
                "wrote {} images to {} (per level {:?})",
                m.len(),
                cfg.out.display(),
                m.counts()
            );
        }
        Command::Probe(c) => {
            let out = pipeline::run_probe::<f32>(&c.run_config()?)?;
            print!("{}", out.val_report);
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Finetune(c) => {
            let out = pipeline::run_finetune::<f32>(&c.run_config()?)?;
            print!("{}", out.val_report);
            if let Some(t) = &out.test_report {
                println!("test:");
                print!("{t}");
            }
            println!(
                "best epoch: {}",
                out.best_epoch.map_or("none".into(), |e| e.to_string())
            );
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval(c) => {
            let cfg = c.run_config()?;
            let ckpt = required(&cfg.init, "--ckpt")?;
            let manifest = required(&cfg.manifest, "--manifest or --data")?;
            let report = pipeline::run_eval::<f32>(ckpt, manifest)?;
            let json = report.to_json() + "\n";
            match &c.out {
                Some(path) => {
                    std::fs::write(path, json).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    print!("{report}");
                }
                None => print!("{json}"),
            }
        }
        Command::Attn(c) => {
            let cfg = c.run_config()?;
            let ckpt = required(&cfg.init, "--ckpt")?;
            let image = required(&cfg.image, "--image")?;
            let out = pipeline::run_attention::<f32>(ckpt, image, cfg.mass, &cfg.out)?;
            println!(
                "kept {} of {} patches, kept_fraction {:.6}",
                out.mask.kept_count(),
                out.mask.cells.len(),
                out.mask.kept_fraction
            );
        }
        Command::ExportFeatures(c) => {
            let cfg = c.run_config()?;
            let ckpt = required(&cfg.init, "--ckpt")?;
            let manifest = required(&cfg.manifest, "--manifest or --data")?;
            let rows = pipeline::export_features::<f32>(ckpt, manifest, &cfg.out)?;
            info!("wrote {rows} feature rows");
            println!("{rows} rows -> {}", cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
