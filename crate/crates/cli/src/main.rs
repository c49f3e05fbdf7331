use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use offset_fl::dualnet::{Architecture, ModelParams, Offset};
use offset_fl::harness::{self, ExperimentConfig, SweepAxis};
use offset_fl::toy::{self, LinearOffsetSpec, ToyClientSpec};
use offset_fl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "offset-fl",
    version,
    about = "Federated learning with per-client input offsets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a partition and write it as JSON together with its heterogeneity.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one experiment per value along an ablation axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// alpha, epochs, strategy or channels
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `0,0.3,0.6` or `single,double`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the cosine-alignment and linear-regression toy CSVs.
    Motivate {
        #[arg(long, default_value = "motivate")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        rounds: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        /// Samples per toy client.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Bytes per client for the model and offset.
    Overhead {
        /// Shape of one input sample, e.g. `64,64,3`.
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 64, 3])]
        input_shape: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Hidden widths of the backbone.
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 32])]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        dense_width: usize,
    },
}

/// Every experiment key can be given in a config file and overridden by a
/// flag of the same name.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_classes: Option<String>,
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    spread: Option<String>,
    #[arg(long)]
    train_fraction: Option<String>,
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    num_clients: Option<String>,
    #[arg(long)]
    classes_per_client: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    lr_model: Option<String>,
    #[arg(long)]
    lr_offset: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    dh_threshold: Option<String>,
    #[arg(long)]
    aggregator_lr: Option<String>,
    #[arg(long)]
    aggregator_steps: Option<String>,
    #[arg(long)]
    warm_start: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    dense_width: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    log_steps: Option<String>,
    #[arg(long)]
    negative_eval: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("num_classes", &self.num_classes),
            ("per_class", &self.per_class),
            ("dim", &self.dim),
            ("spread", &self.spread),
            ("train_fraction", &self.train_fraction),
            ("partition", &self.partition),
            ("num_clients", &self.num_clients),
            ("classes_per_client", &self.classes_per_client),
            ("rounds", &self.rounds),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("alpha", &self.alpha),
            ("lr_model", &self.lr_model),
            ("lr_offset", &self.lr_offset),
            ("strategy", &self.strategy),
            ("mode", &self.mode),
            ("dh_threshold", &self.dh_threshold),
            ("aggregator_lr", &self.aggregator_lr),
            ("aggregator_steps", &self.aggregator_steps),
            ("warm_start", &self.warm_start),
            ("hidden", &self.hidden),
            ("dense_width", &self.dense_width),
            ("seed", &self.seed),
            ("workers", &self.workers),
            ("output_dir", &self.output_dir),
            ("log_steps", &self.log_steps),
            ("negative_eval", &self.negative_eval),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)
                    .map_err(|e| Error::Config(format!("--{key}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Partition { cfg, out } => {
            let cfg = cfg.resolve()?;
            let data = harness::prepare_data(&cfg)?;
            write_or_print(out.as_deref(), &(data.partition.to_json()? + "\n"))?;
            eprintln!("dh = {:.6}", data.dh);
        }
        Command::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let out = harness::run_experiment(&cfg)?;
            println!("dh = {:.6}", out.dh);
            println!("strategy = {}", out.strategy);
            println!("final_accuracy = {:.6}", out.final_accuracy());
            if let Some(dir) = &cfg.output_dir {
                println!("outputs in {}", dir.display());
            }
        }
        Command::Sweep {
            cfg,
            axis,
            values,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let axis: SweepAxis = axis.parse()?;
            let table = harness::ablation_sweep(&cfg, axis, &values)?;
            write_or_print(out.as_deref(), &table.to_csv())?;
        }
        Command::Motivate {
            out_dir,
            seed,
            rounds,
            lr,
            n,
        } => motivate(&out_dir, seed, rounds, lr, n)?,
        Command::Overhead {
            input_shape,
            classes,
            hidden,
            dense_width,
        } => {
            let input_dim: usize = input_shape.iter().product();
            if input_dim == 0 || classes == 0 || dense_width == 0 {
                return Err(Error::Config(
                    "input shape, classes and dense width must be positive".into(),
                ));
            }
            let arch = Architecture {
                hidden,
                dense_width,
                ..Architecture::new(input_dim, classes)
            };
            arch.validate()?;
            let o = harness::communication_overhead(
                &ModelParams::zeros(&arch),
                &Offset::zeros(&input_shape),
            );
            println!("weight_bytes = {}", o.weight_bytes);
            println!("single_channel_weight_bytes = {}", o.single_weight_bytes);
            println!("offset_bytes = {}", o.offset_bytes);
            println!("delta_percent = {:.4}", o.delta_percent);
        }
    }
    Ok(())
}

fn motivate(dir: &Path, seed: u64, rounds: usize, lr: f64, n: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let c1 = ToyClientSpec::new(vec![2.0], 0.1, n, seed.wrapping_add(1));
    let c2 = ToyClientSpec::new(vec![3.0], 0.1, n, seed.wrapping_add(2));
    let w_grid = toy::default_w_grid();
    let curve = |spec: &ToyClientSpec, off: Option<LinearOffsetSpec>| -> Result<Vec<f64>> {
        Ok(toy::cosine_loss_curve(spec, off, &w_grid)?
            .into_iter()
            .map(|(_, l)| l)
            .collect())
    };
    std::fs::write(
        dir.join("cosine_raw.csv"),
        toy::curves_csv(&w_grid, &curve(&c1, None)?, &curve(&c2, None)?),
    )?;
    let best = toy::brute_force_q(&c1, &c2, toy::DEFAULT_P, &toy::default_q_grid(), &w_grid)?;
    let off = |q| {
        Some(LinearOffsetSpec {
            p: toy::DEFAULT_P,
            q,
        })
    };
    std::fs::write(
        dir.join("cosine_offset.csv"),
        toy::curves_csv(
            &w_grid,
            &curve(&c1, off(best.q1))?,
            &curve(&c2, off(best.q2))?,
        ),
    )?;
    println!(
        "cosine: q1 = {:.2}, q2 = {:.2}, discrepancy {:.4} (q = 0: {:.4})",
        best.q1, best.q2, best.discrepancy, best.baseline
    );

    let specs = [
        ToyClientSpec::new(vec![1.0, 2.0], 0.05, n, seed.wrapping_add(11)),
        ToyClientSpec::new(vec![3.0, 1.0], 0.05, n, seed.wrapping_add(12)),
    ];
    for (with, name) in [(false, "linear_plain.csv"), (true, "linear_offset.csv")] {
        let run = toy::federated_linear_regression(&specs, with, rounds, lr, seed)?;
        std::fs::write(dir.join(name), toy::trajectory_csv(&run.losses))?;
        println!(
            "linear regression {}: final loss {:.6}",
            if with {
                "with offsets"
            } else {
                "without offsets"
            },
            run.losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    println!("csv files in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
