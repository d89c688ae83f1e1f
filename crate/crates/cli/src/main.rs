//! `fresco`: unregistered spectral image fusion pipeline.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 numeric abort.

mod checkpoint;
mod commands;
mod config;
mod io;

use std::path::{Path, PathBuf};

use commands::Context;
use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self { message, exit_code: 1 }
    }

    pub fn numeric(message: String) -> Self {
        Self { message, exit_code: 2 }
    }
}

const USAGE: &str = "\
usage: fresco [--seed N] [--config FILE] [--out-dir DIR] <command> [options]

commands:
  gen-data                              build an unregistered pair from config
  estimate-pm --hsi F --msi F --omega S estimate the spectral response
  unmix --hsi F --msi F --p F           coupled unmixing
  tune --hsi F --msi F --p F            grid-search the regularization weights
  train-hsr --hsi-maps F --hsi-ends F --msi-maps F --msi-ends F
                                        train the patch translator
  infer --checkpoint F --hsi-maps F --hsi-ends F
                                        super-resolve abundance maps
  eval --ref F --est F [--report F] [--ppm F]
                                        metric report (PSNR/SSIM/ERGAS)
  pipeline                              full sequence from one config

global flags:
  --seed N      overrides the solver/training seeds
  --config FILE key = value run configuration
  --out-dir DIR output directory (default .)

environment:
  FRESCO_THREADS  caps worker threads (0 = auto)
";

struct Args {
    seed: Option<u64>,
    config_path: Option<PathBuf>,
    out_dir: PathBuf,
    command: String,
    options: Vec<(String, String)>,
}

fn parse_args(argv: &[String]) -> Result<Args, CliError> {
    let mut seed = None;
    let mut config_path = None;
    let mut out_dir = PathBuf::from(".");
    let mut command = None;
    let mut options = Vec::new();

    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        let mut take_value = |name: &str| -> Result<String, CliError> {
            i += 1;
            argv.get(i)
                .cloned()
                .ok_or_else(|| CliError::usage(format!("flag {name} needs a value")))
        };
        match arg.as_str() {
            "--seed" => {
                let v = take_value("--seed")?;
                seed = Some(v.parse().map_err(|_| CliError::usage(format!("bad seed `{v}`")))?);
            }
            "--config" => config_path = Some(PathBuf::from(take_value("--config")?)),
            "--out-dir" => out_dir = PathBuf::from(take_value("--out-dir")?),
            "--help" | "-h" => {
                return Err(CliError { message: USAGE.to_string(), exit_code: 0 });
            }
            flag if flag.starts_with("--") => {
                if command.is_none() {
                    return Err(CliError::usage(format!("unknown global flag `{flag}`")));
                }
                let value = take_value(flag)?;
                options.push((flag.trim_start_matches("--").to_string(), value));
            }
            name => {
                if command.is_some() {
                    return Err(CliError::usage(format!("unexpected argument `{name}`")));
                }
                command = Some(name.to_string());
            }
        }
        i += 1;
    }
    let command = command.ok_or_else(|| CliError::usage("no command given".to_string()))?;
    Ok(Args { seed, config_path, out_dir, command, options })
}

fn option<'a>(args: &'a Args, name: &str) -> Result<&'a str, CliError> {
    args.options
        .iter()
        .find(|(k, _)| k == name)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CliError::usage(format!("{} requires --{name}", args.command)))
}

fn option_opt<'a>(args: &'a Args, name: &str) -> Option<&'a str> {
    args.options.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}

fn known_options(args: &Args, allowed: &[&str]) -> Result<(), CliError> {
    for (k, _) in &args.options {
        if !allowed.contains(&k.as_str()) {
            return Err(CliError::usage(format!(
                "unknown flag --{k} for {}",
                args.command
            )));
        }
    }
    Ok(())
}

fn run(argv: &[String]) -> Result<(), CliError> {
    let args = parse_args(argv)?;

    if let Ok(threads) = std::env::var("FRESCO_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| CliError::usage(format!("bad FRESCO_THREADS value `{threads}`")))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
        }
    }

    let config = match &args.config_path {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Context {
        config,
        out_dir: args.out_dir.clone(),
        seed: args.seed,
    };

    match args.command.as_str() {
        "gen-data" => {
            known_options(&args, &[])?;
            commands::gen_data(&ctx)
        }
        "estimate-pm" => {
            known_options(&args, &["hsi", "msi", "omega"])?;
            commands::estimate_pm(
                &ctx,
                Path::new(option(&args, "hsi")?),
                Path::new(option(&args, "msi")?),
                option(&args, "omega")?,
            )
        }
        "unmix" => {
            known_options(&args, &["hsi", "msi", "p"])?;
            commands::unmix(
                &ctx,
                Path::new(option(&args, "hsi")?),
                Path::new(option(&args, "msi")?),
                Path::new(option(&args, "p")?),
            )
        }
        "tune" => {
            known_options(&args, &["hsi", "msi", "p"])?;
            commands::tune(
                &ctx,
                Path::new(option(&args, "hsi")?),
                Path::new(option(&args, "msi")?),
                Path::new(option(&args, "p")?),
            )
        }
        "train-hsr" => {
            known_options(&args, &["hsi-maps", "hsi-ends", "msi-maps", "msi-ends"])?;
            commands::train_hsr(
                &ctx,
                Path::new(option(&args, "hsi-maps")?),
                Path::new(option(&args, "hsi-ends")?),
                Path::new(option(&args, "msi-maps")?),
                Path::new(option(&args, "msi-ends")?),
            )
        }
        "infer" => {
            known_options(&args, &["checkpoint", "hsi-maps", "hsi-ends"])?;
            commands::infer(
                &ctx,
                Path::new(option(&args, "checkpoint")?),
                Path::new(option(&args, "hsi-maps")?),
                Path::new(option(&args, "hsi-ends")?),
            )
        }
        "eval" => {
            known_options(&args, &["ref", "est", "report", "ppm"])?;
            commands::eval(
                &ctx,
                Path::new(option(&args, "ref")?),
                Path::new(option(&args, "est")?),
                option_opt(&args, "report").map(Path::new),
                option_opt(&args, "ppm").map(Path::new),
            )
        }
        "pipeline" => {
            known_options(&args, &[])?;
            commands::pipeline(&ctx)
        }
        other => Err(CliError::usage(format!("unknown command `{other}`"))),
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => {}
        Err(e) => {
            if e.exit_code == 0 {
                print!("{}", e.message);
                std::process::exit(0);
            }
            eprintln!("error: {}", e.message);
            if e.exit_code == 1 {
                eprintln!("\n{USAGE}");
            }
            std::process::exit(e.exit_code);
        }
    }
}
