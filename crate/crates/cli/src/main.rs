use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use textsplat::pipeline::{export_ply, import_ply, render_turntable, run_checks, Pipeline, RunConfig};
use textsplat::splat::image::{write_imgf, write_ppm};
use textsplat::textenc::export_embeddings;

#[derive(Parser)]
#[command(name = "textsplat", version, about = "Text-conditioned Gaussian splat generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set max_iter=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Prompt embeddings (TEMB) keyed by prompt-set id.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn pipeline(&self, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Pipeline> {
        let mut p = match checkpoint {
            Some(c) => Pipeline::load(cfg, c)?,
            None => Pipeline::new(cfg)?,
        };
        if let Some(path) = &self.embeddings {
            let n = p.import_embeddings(path, &cfg.prompts()?)?;
            eprintln!("imported {n} prompt embeddings");
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Ppm,
    Imgf,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the prompt set with the built-in mock guidance.
    Train {
        #[command(flatten)]
        common: Common,
        /// Where to write the trained checkpoint.
        #[arg(long, short)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Generate Gaussians for one prompt and write them as PLY.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        prompt: String,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Render a turntable of a PLY file.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ply: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ImageFormat::Ppm)]
        format: ImageFormat,
    },
    /// Generate along a straight line between two prompt embeddings.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the prompt-set embeddings as a TEMB file.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks on a fresh model.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            out,
            resume,
            quiet,
        } => {
            let cfg = common.run_config()?;
            let prompts = cfg.prompts()?;
            let mut p = common.pipeline(&cfg, resume.as_deref())?;
            let mut stdout = std::io::stdout();
            let log: Option<&mut dyn Write> = if quiet { None } else { Some(&mut stdout) };
            let metrics = p.train_mock(&prompts, log)?;
            p.save(&out)?;
            if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
                println!(
                    "trained {} iterations, mse {:.5} -> {:.5}, checkpoint {}",
                    metrics.len(),
                    first.mse,
                    last.mse,
                    out.display()
                );
            }
        }
        Command::Generate {
            common,
            checkpoint,
            prompt,
            out,
        } => {
            let cfg = common.run_config()?;
            let p = common.pipeline(&cfg, Some(&checkpoint))?;
            let report = p.generate(&prompt)?;
            export_ply(&report.set, &out)?;
            println!("{report}; wrote {}", out.display());
        }
        Command::Render {
            common,
            ply,
            frames,
            out_dir,
            format,
        } => {
            let cfg = common.run_config()?;
            let set = import_ply(&ply)?;
            let tt = cfg.turntable();
            let report = render_turntable(&set, frames, &tt, None)?;
            std::fs::create_dir_all(&out_dir).with_context(|| out_dir.display().to_string())?;
            for (k, rgb) in report.frames.iter().enumerate() {
                match format {
                    ImageFormat::Ppm => write_ppm(&out_dir.join(format!("frame_{k:03}.ppm")), rgb, tt.width, tt.height)?,
                    ImageFormat::Imgf => {
                        write_imgf(&out_dir.join(format!("frame_{k:03}.imgf")), rgb, tt.width, tt.height)?
                    }
                }
            }
            println!("{report}; wrote {}", out_dir.display());
        }
        Command::Interpolate {
            common,
            checkpoint,
            from,
            to,
            steps,
            out_dir,
        } => {
            let cfg = common.run_config()?;
            let p = common.pipeline(&cfg, Some(&checkpoint))?;
            let sets = p.interpolate_prompts(&from, &to, steps)?;
            std::fs::create_dir_all(&out_dir).with_context(|| out_dir.display().to_string())?;
            for (k, set) in sets.iter().enumerate() {
                export_ply(set, &out_dir.join(format!("interp_{k:03}.ply")))?;
            }
            println!("wrote {} PLY files to {}", sets.len(), out_dir.display());
        }
        Command::Export { common, out } => {
            let cfg = common.run_config()?;
            let prompts = cfg.prompts()?;
            let p = common.pipeline(&cfg, None)?;
            let entries = p.embeddings_for(&prompts)?;
            export_embeddings(&out, &entries)?;
            println!("wrote {} embeddings to {}", entries.len(), out.display());
        }
        Command::Check { common } => {
            let cfg = common.run_config()?;
            let results = run_checks(&cfg)?;
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                bail!("{} of {} checks failed", results.iter().filter(|r| !r.passed).count(), results.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on argument errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
