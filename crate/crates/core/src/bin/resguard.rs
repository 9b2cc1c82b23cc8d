use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use resguard::attack::{average_residual, koa_attack, run_attack_sweep, sweep_csv, MessageMode};
use resguard::checkpoint::{load_checkpoint, save_checkpoint};
use resguard::codec::Message;
use resguard::config::ExperimentConfig;
use resguard::data::{generate_synthetic_dataset, read_png, write_png};
use resguard::experiment::{
    collect_reports, load_datasets, model_report, run_experiment, sweep_svg, train_or_load, write_model_report,
    write_summary, ModelReport,
};
use resguard::metrics::embed_all;
use resguard::rng::{stream, Stream};
use resguard::trainer::Variant;
use resguard::Error;

#[derive(Parser)]
#[command(name = "resguard", version, about = "Residual watermark training, attack and evaluation")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic PNG images.
    GenData {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train models and save checkpoints.
    Train {
        /// base, rse, knl or resguard; defaults to the config's model list.
        #[arg(long, value_parser = parse_variant)]
        model: Vec<Variant>,
    },
    /// Embed a message into a PNG.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        message_hex: String,
    },
    /// Decode a PNG and print the message.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Remove a watermark with the residual averaged over N known pairs.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value = "same", value_parser = parse_mode)]
        mode: MessageMode,
        /// Skip the final clamp to [0, 1].
        #[arg(long)]
        unclamped: bool,
    },
    /// Full evaluation of one checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which loss combination the checkpoint was trained with.
        #[arg(long, value_parser = parse_variant)]
        model: Variant,
    },
    /// KOA sweep of one checkpoint.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate all four loss combinations.
    Ablate,
    /// Rebuild the summary CSV and plot from existing reports.
    Report,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown model `{s}` (base, rse, knl, resguard)"))
}

fn parse_mode(s: &str) -> Result<MessageMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("this command requires --config <path>".into()))?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, Failure> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.into()))?;
    Ok(dir)
}

fn image_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData { count, size } => {
            let dir = out_dir(cli)?;
            let images = generate_synthetic_dataset(*count, *size, cli.seed.unwrap_or(0))?;
            for (i, img) in images.iter().enumerate() {
                write_png(&dir.join(format!("{i:05}.png")), img)?;
            }
            println!("wrote {} images to {}", images.len(), dir.display());
        }
        Command::Train { model } => {
            let cfg = config(cli)?;
            let (train_set, _) = load_datasets(&cfg)?;
            let models = if model.is_empty() { cfg.models.clone() } else { model.clone() };
            for v in models {
                let dir = cfg.out.join(v.name());
                std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.into()))?;
                let (codec, log) = train_or_load(&cfg, v, &train_set)?;
                if let Some(log) = log {
                    std::fs::write(dir.join("train_log.csv"), log.to_csv()).map_err(|e| Failure::Runtime(e.into()))?;
                }
                let path = dir.join("model.rgwm");
                let tc = serde_json::to_value(cfg.train_config(v)).map_err(|e| Failure::Runtime(e.into()))?;
                save_checkpoint(&path, &codec, &tc, cfg.seed)?;
                println!("{}: {}", v.name(), path.display());
            }
        }
        Command::Embed {
            checkpoint,
            image,
            message_hex,
        } => {
            let codec = load_checkpoint(checkpoint)?.codec;
            let msg = Message::from_hex(message_hex, codec.arch().message_len)
                .map_err(|e| Failure::Usage(format!("--message-hex: {e}")))?;
            let host = read_png(image)?;
            let wm = codec.embed(&host, &msg)?;
            let path = out_dir(cli)?.join(format!("{}_wm.png", image_stem(image)));
            write_png(&path, &wm)?;
            println!("{}", path.display());
        }
        Command::Extract { checkpoint, image } => {
            let codec = load_checkpoint(checkpoint)?.codec;
            let soft = codec.extract(&read_png(image)?)?;
            let msg = resguard::codec::threshold(&soft);
            println!("{}", msg.to_hex());
            let vals: Vec<String> = soft.iter().map(|v| format!("{v:.4}")).collect();
            println!("{}", vals.join(" "));
        }
        Command::Attack {
            checkpoint,
            image,
            n,
            mode,
            unclamped,
        } => {
            let cfg = config(cli)?;
            let codec = load_checkpoint(checkpoint)?.codec;
            let (_, pool) = load_datasets(&cfg)?;
            if pool.len() < *n || *n == 0 {
                return Err(Error::DatasetTooSmall {
                    required: (*n).max(1),
                    available: pool.len(),
                }
                .into());
            }
            let l = codec.arch().message_len;
            let mut rng = stream(cfg.seed, Stream::Messages, 0);
            let msgs: Vec<Message> = match mode {
                MessageMode::Same => vec![Message::random(l, &mut rng); *n],
                MessageMode::Different => (0..*n).map(|_| Message::random(l, &mut rng)).collect(),
            };
            let hosts = &pool[..*n];
            let wms = embed_all(&codec, hosts, &msgs)?;
            let pairs: Vec<_> = hosts.iter().cloned().zip(wms).collect();
            let r_avg = average_residual(&pairs)?;
            let attacked = koa_attack(&read_png(image)?, &r_avg, !unclamped)?;
            let path = cfg.out.join(format!("{}_attacked.png", image_stem(image)));
            std::fs::create_dir_all(&cfg.out).map_err(|e| Failure::Runtime(e.into()))?;
            write_png(&path, &attacked)?;
            println!("{}", path.display());
        }
        Command::Evaluate { checkpoint, model } => {
            let cfg = config(cli)?;
            let codec = load_checkpoint(checkpoint)?.codec;
            let (_, eval_set) = load_datasets(&cfg)?;
            let report = model_report(&cfg, *model, &codec, &eval_set)?;
            write_model_report(&cfg.out.join(model.name()), &report)?;
            print_summary(&[report]);
        }
        Command::Sweep { checkpoint } => {
            let cfg = config(cli)?;
            let codec = load_checkpoint(checkpoint)?.codec;
            let (_, eval_set) = load_datasets(&cfg)?;
            let mut rows = Vec::new();
            for &mode in &cfg.message_modes {
                rows.extend(run_attack_sweep(
                    &codec,
                    &eval_set,
                    &cfg.n_grid,
                    cfg.num_targets,
                    mode,
                    cfg.attack_clamped,
                    cfg.seed,
                )?);
            }
            let csv = sweep_csv(&rows);
            let io = |e: std::io::Error| Failure::Runtime(e.into());
            std::fs::create_dir_all(&cfg.out).map_err(io)?;
            std::fs::write(cfg.out.join("sweep.csv"), &csv).map_err(io)?;
            let name = image_stem(checkpoint);
            std::fs::write(cfg.out.join("sweep.svg"), sweep_svg(&[(name.as_str(), &rows[..])])).map_err(io)?;
            print!("{csv}");
        }
        Command::Ablate => {
            let mut cfg = config(cli)?;
            cfg.models = Variant::ALL.to_vec();
            let outcomes = run_experiment(&cfg)?;
            print_summary(&outcomes.into_iter().map(|o| o.report).collect::<Vec<_>>());
        }
        Command::Report => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let reports = collect_reports(&dir)?;
            write_summary(&dir, &reports)?;
            print_summary(&reports);
        }
    }
    Ok(())
}

fn print_summary(reports: &[ModelReport]) {
    println!("model      clean   noise   koa_same_n1  koa_diff_n1  psnr    ressim");
    for r in reports {
        let e = &r.report;
        let noise = e.distortion_acc("gaussian_noise_s0.05").unwrap_or(f64::NAN);
        let same = e.koa_row(1, MessageMode::Same).map_or(f64::NAN, |k| k.bit_acc_mean);
        let diff = e.koa_row(1, MessageMode::Different).map_or(f64::NAN, |k| k.bit_acc_mean);
        println!(
            "{:<10} {:.4}  {:.4}  {:.4}       {:.4}       {:.2}  {:.4}",
            r.model, e.clean_bit_acc, noise, same, diff, e.psnr_watermarked, e.residual_similarity
        );
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
