use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dfq_core::analysis::{cka_heatmap, lambda_sweep};
use dfq_core::checkpoint::Checkpoint;
use dfq_core::config::{parse_config, RunConfig};
use dfq_core::data::{load_dataset, save_packed, synthetic_shapes, Normalizer, PACKED_FILE};
use dfq_core::generator::{sample_content, sample_style, Generator};
use dfq_core::model_zoo::{build, pretrain, Classifier};
use dfq_core::training::{
    self, evaluate, load_student, load_teacher, rng_stream, FloatPredictor, QuantPredictor, RunControl,
};
use dfq_core::{Error, Tape};

const OUT_ENV: &str = "CAUSAL_DFQ_OUT";

#[derive(Parser)]
#[command(name = "dfq", version, about = "Data-free quantization with style-intervention consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set causal.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> dfq_core::Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural shapes dataset (train and test splits).
    SynthData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        train_size: usize,
        #[arg(long, default_value_t = 2_000)]
        test_size: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the full-precision teacher on labelled data.
    Pretrain(ConfigArgs),
    /// Data-free fine-tuning of the quantized student.
    DfqTrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs (checkpoint kept for --resume).
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Top-1 accuracy of a teacher or run checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation split; defaults to the configured test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// CKA heatmap between the teacher and a fine-tuned student.
    Cka {
        /// Run checkpoint holding the student.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Probe batch size.
        #[arg(long, default_value_t = 256)]
        probe_size: usize,
    },
    /// Fine-tune for every (lambda, seed) and tabulate final accuracy.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated lambdas; must include 0.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f32>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory; defaults to `<out_root>/sweep`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| cfg.out_root.clone(), PathBuf::from)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(training::CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn synth_data(out: &Path, train_size: usize, test_size: usize, image_size: usize, seed: u64) -> Result<()> {
    for (split, n, stream) in [("train", train_size, 0u64), ("test", test_size, 1)] {
        let data = synthetic_shapes(n, image_size, seed.wrapping_mul(2).wrapping_add(stream));
        let path = out.join(split).join(PACKED_FILE);
        save_packed(&data, &path)?;
        println!("wrote {} images to {}", n, path.display());
    }
    Ok(())
}

fn cmd_pretrain(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let mut rng = rng_stream(cfg.seed, 0);
    let mut model = build(&cfg.model, &mut rng)?;
    let ckpt_path = cfg.teacher_checkpoint.clone();
    let dir = ckpt_path.parent().map(Path::to_path_buf).unwrap_or_default();
    write_config(&dir, &cfg)?;
    let metrics = pretrain(
        &mut model,
        &cfg.data.train,
        &cfg.data.test,
        &ckpt_path,
        &cfg.pretrain,
        &cfg.normalization,
        &mut rng,
    )?;
    let text = serde_json::to_string_pretty(&metrics)?;
    fs::write(dir.join("pretrain_metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_train(args: &ConfigArgs, resume: bool, stop_after_epochs: Option<usize>) -> Result<()> {
    let cfg = args.load()?;
    let dir = cfg.run_dir(Some(&out_root(&cfg)));
    let summary = training::run(
        &cfg,
        &dir,
        &RunControl {
            resume,
            stop_after_epochs,
        },
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data_path = data.map_or_else(|| cfg.data.test.clone(), Path::to_path_buf);
    let acc = match ckpt.kind() {
        Some("teacher") => {
            let normalizer: Normalizer = ckpt.get_json("normalization")?;
            let mut model = Classifier::from_checkpoint(&ckpt, "")?;
            let eval = load_dataset(&data_path)?;
            evaluate(
                &mut FloatPredictor {
                    model: &mut model,
                    normalizer: &normalizer,
                },
                &eval,
            )?
        }
        Some("run") => {
            let run_cfg: RunConfig = ckpt.get_json("config")?;
            let mut student = load_student(checkpoint)?;
            let eval = load_dataset(&data_path)?;
            evaluate(
                &mut QuantPredictor {
                    model: &mut student,
                    normalizer: &run_cfg.normalization,
                },
                &eval,
            )?
        }
        other => return Err(Error::Checkpoint(format!("unsupported checkpoint kind {other:?}")).into()),
    };
    println!("{{\"checkpoint\": {:?}, \"accuracy\": {acc}}}", checkpoint.display().to_string());
    Ok(())
}

fn cmd_cka(checkpoint: &Path, out: Option<&Path>, probe_size: usize) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg: RunConfig = ckpt.get_json("config")?;
    let mut teacher = load_teacher(&cfg.teacher_checkpoint)?;
    let mut student = load_student(checkpoint)?;
    let generator = Generator::from_checkpoint(&ckpt, "generator.")?;
    let mut rng = rng_stream(cfg.seed, 7);
    let content = sample_content(probe_size, generator.spec().num_classes, &mut rng)?;
    let style = sample_style(probe_size, generator.spec().latent_dim, &mut rng);
    let batch = generator.generate(&content, &style)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.images);
    let x = cfg.normalization.apply_signed(&mut tape, x);
    let probe = tape.value(x).clone();
    let matrix = cka_heatmap(&mut teacher, &mut student, &probe, "generated")?;
    let dir = out.map_or_else(
        || checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
        Path::to_path_buf,
    );
    matrix.save(&dir)?;
    write_config(&dir, &cfg)?;
    print!("{}", matrix.to_csv());
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, lambdas: Option<&[f32]>, seeds: Option<&[u64]>, out: Option<&Path>) -> Result<()> {
    let cfg = args.load()?;
    let lambdas = lambdas.unwrap_or(&cfg.sweep.lambdas).to_vec();
    let seeds = seeds.unwrap_or(&cfg.sweep.seeds).to_vec();
    let dir = out.map_or_else(|| out_root(&cfg).join("sweep"), Path::to_path_buf);
    write_config(&dir, &cfg)?;
    let table = lambda_sweep(&cfg, &lambdas, &seeds, &dir)?;
    print!("{}", table.summary_csv());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            train_size,
            test_size,
            image_size,
            seed,
        } => synth_data(&out, train_size, test_size, image_size, seed),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::DfqTrain {
            config,
            resume,
            stop_after_epochs,
        } => cmd_train(&config, resume, stop_after_epochs),
        Command::Eval {
            checkpoint,
            data,
            config,
        } => cmd_eval(&checkpoint, data.as_deref(), &config),
        Command::Cka {
            checkpoint,
            out,
            probe_size,
        } => cmd_cka(&checkpoint, out.as_deref(), probe_size),
        Command::Sweep {
            config,
            lambdas,
            seeds,
            out,
        } => cmd_sweep(&config, lambdas.as_deref(), seeds.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err:#}");
            eprintln!("error: {err:#}");
            let validation = err.downcast_ref::<Error>().is_some_and(Error::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
