//! `cdsl` command-line interface.
//!
//! Any `--<key> <value>` whose first dotted segment names a config field
//! (`--train.epochs 2`, `--seed 3`, `--network.scale_inputs '[0.5]'`) is a config override.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cdsl::experiment::{
    config_keys, run_cv, run_eval, run_predict, run_synth, run_train, ExperimentConfig, SEED_ENV,
};
use cdsl::nn::Mode;
use cdsl::train::gradcheck::{suite, CheckCase, Component};
use cdsl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cdsl", version, about = "Cascaded dual-scale LinkNet segmentation toolkit")]
struct Cli {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic dataset to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model (or a cascade if `cascade` is set) with a validation split.
    Train,
    /// Train a two-stage cascade.
    CascadeTrain,
    /// Score a saved model on the configured dataset.
    Eval {
        /// model.json, cascade.json, or a bare checkpoint (uses the config's network).
        #[arg(long)]
        model: PathBuf,
    },
    /// k-fold cross-validation.
    Cv,
    /// Segment one image into `<out>_prob.png` and `<out>_mask.png`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks in 64-bit.
    GradCheck {
        /// Component to check; the full suite when omitted.
        #[arg(long)]
        component: Option<Component>,
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        /// Input dims as n,c,h,w.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Finite-difference step.
        #[arg(long, default_value_t = cdsl::train::gradcheck::FD_EPS)]
        eps: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliMode {
    Train,
    Eval,
}

/// Splits config overrides out of the raw arguments.
/// Remaining clap arguments and `(key, value)` overrides.
type Split = (Vec<String>, Vec<(String, String)>);

fn split_overrides(args: Vec<String>) -> std::result::Result<Split, String> {
    let keys = config_keys();
    let is_override = |flag: &str| keys.iter().any(|k| flag.split('.').next() == Some(k));
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| is_override(f.split('=').next().unwrap_or(f))) else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("--{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn config(cli: &Cli, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let env_seed = std::env::var(SEED_ENV).ok();
    ExperimentConfig::load(cli.config.as_deref(), env_seed.as_deref(), overrides)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Synth { out } => {
            let n = run_synth(&config(&cli, &overrides)?, out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train => {
            let c = config(&cli, &overrides)?;
            let report = run_train(&c)?;
            println!("model: {}", c.output_dir.join(&report.manifest).display());
            if let Some(v) = report.validation {
                println!(
                    "validation: dice {:.4}  mean IoU {:.4}",
                    v.aggregate.mean_dice, v.aggregate.mean_miou
                );
            }
        }
        Command::CascadeTrain => {
            let mut c = config(&cli, &overrides)?;
            c.cascade = true;
            let c = c.resolved()?;
            let report = run_train(&c)?;
            println!("cascade: {}", c.output_dir.join(&report.manifest).display());
            if let Some(v) = report.validation {
                println!(
                    "validation: dice {:.4}  mean IoU {:.4}",
                    v.aggregate.mean_dice, v.aggregate.mean_miou
                );
            }
        }
        Command::Eval { model } => {
            let c = config(&cli, &overrides)?;
            let r = run_eval(&c, model)?;
            println!(
                "{} images: dice {:.4}  mean IoU {:.4}  ({})",
                r.per_image.len(),
                r.aggregate.mean_dice,
                r.aggregate.mean_miou,
                c.output_dir.join("metrics.json").display()
            );
        }
        Command::Cv => {
            let c = config(&cli, &overrides)?;
            let r = run_cv(&c)?;
            for f in &r.per_fold {
                println!(
                    "fold {}: dice {:.4}  mean IoU {:.4}",
                    f.fold, f.metrics.aggregate.mean_dice, f.metrics.aggregate.mean_miou
                );
            }
            println!("mean: dice {:.4}  mean IoU {:.4}", r.mean_dice, r.mean_miou);
            if let Some(t) = &r.reference {
                let miou = t.mean_iou.map(|m| format!("  mean IoU {m:.4}")).unwrap_or_default();
                println!("reference (full scale): dice {:.4}{miou}", t.dice);
            }
        }
        Command::Predict { model, image, out } => {
            let c = config(&cli, &overrides)?;
            let (p, m) = run_predict(model, &c.network, image, out)?;
            println!("{}\n{}", p.display(), m.display());
        }
        Command::GradCheck {
            component,
            mode,
            dims,
            eps,
        } => {
            let seed = config(&cli, &overrides)?.seed;
            let cases = match component {
                None => suite(seed),
                Some(c) => {
                    let default = suite(seed).into_iter().find(|k| k.component == *c).expect("every component is in the suite");
                    let mut case = CheckCase::new(*c, default.mode, seed);
                    if let Some(m) = mode {
                        case.mode = match m {
                            CliMode::Train => Mode::Train,
                            CliMode::Eval => Mode::Eval,
                        };
                    }
                    if let Some(d) = dims {
                        case.dims = d.as_slice().try_into().map_err(|_| {
                            Error::Config(format!("--dims needs 4 values n,c,h,w, got {}", d.len()))
                        })?;
                    }
                    vec![case]
                }
            };
            let mut failed = 0;
            for case in cases {
                let r = case.run_with_eps(*eps)?;
                println!("{r}");
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                eprintln!("{failed} gradient check(s) above tolerance");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
