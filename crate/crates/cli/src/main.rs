use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vstyle::commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_long_video, cmd_stylize, cmd_train, Arm, LongVideoArgs, StylizeArgs,
};
use vstyle::config::RunConfig;
use vstyle::datagen::Tier;
use vstyle::net::LoraMode;
use vstyle::pipeline::TrainTarget;
use vstyle::{Error, Result};

/// Desk-scale unified video stylization: data generation, training,
/// inference, evaluation and ablations.
///
/// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
#[derive(Parser, Debug)]
#[command(name = "vstyle", version)]
struct Cli {
    /// JSON run configuration; omitted keys take built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and filter a paired dataset.
    GenData {
        /// CT or SFT.
        #[arg(long)]
        profile: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to seeds.ct_data or seeds.sft_data.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the base model if absent, then the requested stage(s).
    Train {
        /// base, ct, sft or full (CT then SFT).
        #[arg(long, default_value = "full")]
        stage: String,
        /// token_specific or standard.
        #[arg(long)]
        lora: Option<String>,
        /// Overrides paths.run_dir.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Overrides paths.data_dir (expects ct/ and sft/ inside).
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Stylize one video.
    Stylize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw input video (.vtf); omit for t2v.
        #[arg(long)]
        input: Option<PathBuf>,
        /// text, style-image, first-frame, t2v or fuse.
        #[arg(long)]
        mode: String,
        /// Style operator name, e.g. sepia.
        #[arg(long)]
        style_tag: Option<String>,
        /// Style reference image (.vtf, first frame used).
        #[arg(long)]
        style_image: Option<PathBuf>,
        /// Stylized first frame (.vtf, first frame used).
        #[arg(long)]
        first_frame: Option<PathBuf>,
        /// Content tag ids, comma separated.
        #[arg(long, value_delimiter = ',')]
        tags: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stylize consecutive segments, chaining each last frame into the next.
    LongVideo {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Segment video (.vtf); repeat in order, at least twice.
        #[arg(long = "segment")]
        segments: Vec<PathBuf>,
        #[arg(long)]
        style_tag: Option<String>,
        #[arg(long)]
        style_image: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        tags: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a test dataset in every single-condition mode.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test dataset directory; defaults to <data_dir>/test.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare ablation arms on style-image-guided stylization.
    Ablate {
        /// no_token_lora, ct_only, sft_only or full; repeatable, default all.
        #[arg(long = "arm")]
        arms: Vec<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config)?;
    match cli.command {
        Command::GenData { profile, n, out, seed } => {
            let tier = Tier::parse(&profile)?;
            let seed = seed.unwrap_or(match tier {
                Tier::Ct => cfg.seeds.ct_data,
                Tier::Sft => cfg.seeds.sft_data,
            });
            let s = cmd_gen_data(&cfg, &profile, n, &out, seed)?;
            println!("manifest {}", s.manifest.display());
            println!("sha256 {}", s.manifest_sha256);
            println!("accepted {} rejected {} attempts {}", s.accepted, s.rejected, s.attempts);
            println!("style score histogram\n{}", s.style_histogram.render());
            if let Some(h) = &s.structure_histogram {
                println!("structure score histogram\n{}", h.render());
            }
        }
        Command::Train {
            stage,
            lora,
            run_dir,
            data_dir,
        } => {
            let target = TrainTarget::parse(&stage)?;
            if let Some(l) = lora {
                cfg.model.lora_mode = match l.as_str() {
                    "token_specific" => LoraMode::TokenSpecific,
                    "standard" => LoraMode::Standard,
                    _ => return Err(Error::Usage(format!("unknown --lora '{l}' (token_specific, standard)"))),
                };
            }
            if let Some(d) = data_dir {
                cfg.paths.data_dir = d;
            }
            let run_dir = run_dir.unwrap_or_else(|| cfg.paths.run_dir.clone());
            let s = cmd_train(&cfg, target, &run_dir)?;
            for r in &s.reports {
                println!(
                    "{}: {} iterations, validation loss {:.4} -> {:.4}, {:.0}s",
                    r.stage.name(),
                    r.iterations,
                    r.initial_val_loss,
                    r.final_val_loss,
                    r.seconds
                );
            }
            println!("checkpoint {}", s.final_checkpoint.display());
        }
        Command::Stylize {
            checkpoint,
            input,
            mode,
            style_tag,
            style_image,
            first_frame,
            tags,
            steps,
            seed,
            out,
        } => {
            let args = StylizeArgs {
                checkpoint,
                input,
                mode,
                style_tag,
                style_image,
                first_frame,
                tags,
                steps,
                seed,
                out,
            };
            let v = cmd_stylize(&cfg, &args)?;
            println!("wrote {} frames to {}", v.frames(), args.out.display());
        }
        Command::LongVideo {
            checkpoint,
            segments,
            style_tag,
            style_image,
            tags,
            steps,
            seed,
            out,
        } => {
            let args = LongVideoArgs {
                checkpoint,
                segments,
                style_tag,
                style_image,
                tags,
                steps,
                seed,
                out,
            };
            let (v, r) = cmd_long_video(&cfg, &args)?;
            println!("wrote {} frames to {}", v.frames(), args.out.display());
            println!("style drift {:.4}, seam error {:?}", r.max_style_drift, r.seam_error);
        }
        Command::Eval { checkpoint, test, out } => {
            let test = test.unwrap_or_else(|| cfg.paths.data_dir.join("test"));
            let r = cmd_eval(&cfg, &checkpoint, &test, &out)?;
            for (mode, cols) in &r.summary {
                let line: Vec<String> = cols.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
                println!("{mode}: {}", line.join(", "));
            }
        }
        Command::Ablate { arms, data_dir, out } => {
            let arms = if arms.is_empty() {
                Arm::ALL.to_vec()
            } else {
                arms.iter().map(|a| Arm::parse(a)).collect::<Result<Vec<_>>>()?
            };
            if let Some(d) = data_dir {
                cfg.paths.data_dir = d;
            }
            let r = cmd_ablate(&cfg, &arms, &out)?;
            println!("{:<26} {:>10} {:>10}", "arm", "CSD Score", "DINO Score");
            for row in &r.rows {
                println!("{:<26} {:>10.4} {:>10.4}", row.label, row.csd, row.dino);
            }
            for n in &r.notes {
                println!("{n}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
