use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use coe_core::data::{generate_synthetic, save_multiplex, split_nodes, PerturbMode, SyntheticSpec};
use coe_core::experiment::{
    ablation_suite, fusion_vs_addition, robustness_sweep, run, sensitivity_sweep, theory_on_config, DataSource,
    ExperimentConfig, Report, SweepParam, ThetaNodes,
};
use coe_core::fusion::ThetaOptimizer;
use coe_core::refinery::KnnMode;
use coe_core::theory::{verify_theory, TheoryReport};
use coe_core::CoeError;

#[derive(Parser, Debug)]
#[command(name = "coe", version, about = "Cooperation of experts on multiplex networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full pipeline over every seed.
    Run(Common),
    /// Accuracy under random edge additions and deletions.
    Robustness(Common),
    /// Accuracy over a grid of α, λ or K.
    Sensitivity {
        #[arg(long, value_enum)]
        param: Param,
        #[command(flatten)]
        common: Common,
    },
    /// CoE against the RF, WRF, w/o HE and w/o GSL variants.
    Ablation(Common),
    /// Fused all-layer graph against the averaged adjacency.
    FusionCompare(Common),
    /// Numerical checks of the Stage-2 objective.
    VerifyTheory {
        /// Probe opinions from a trained roster instead of random ones.
        #[arg(long)]
        trained: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured synthetic dataset to a directory.
    GenData {
        /// Also write a split.json drawn with this seed.
        #[arg(long)]
        split_seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Param {
    Alpha,
    Lambda,
    K,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KnnArg {
    Exact,
    Lsh,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    PlainGd,
    Adaptive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ThetaNodesArg {
    Validation,
    TrainValidation,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dataset directory; the reference synthetic set is used otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Seed of the synthetic generator.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    temperature: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    no_gsl: bool,
    #[arg(long)]
    no_he: bool,
    #[arg(long)]
    rf: bool,
    #[arg(long)]
    wrf: bool,
    #[arg(long, allow_negative_numbers = true)]
    train_fraction: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    val_fraction: Option<f64>,
    #[arg(long)]
    refresh_every: Option<usize>,
    #[arg(long, value_enum)]
    knn_mode: Option<KnnArg>,
    #[arg(long)]
    high_level_ce: Option<bool>,
    #[arg(long, allow_negative_numbers = true)]
    theta_lr: Option<f64>,
    #[arg(long)]
    theta_iterations: Option<usize>,
    #[arg(long, value_enum)]
    theta_optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    theta_nodes: Option<ThetaNodesArg>,
    #[arg(long, allow_negative_numbers = true)]
    norm_cap: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    robustness_ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    robustness_modes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    /// Skip the theory checks attached to `run`.
    #[arg(long)]
    no_theory: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, CoeError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.dataset {
            cfg.data = DataSource::Directory { path: path.clone() };
        }
        if let Some(seed) = self.data_seed {
            match &mut cfg.data {
                DataSource::Synthetic(spec) => spec.seed = seed,
                DataSource::Directory { .. } => {
                    return Err(CoeError::Invalid("--data-seed applies to synthetic data only".into()))
                }
            }
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        set!(
            epochs,
            lr,
            hidden_dim,
            embed_dim,
            knn_k,
            order,
            layers,
            temperature,
            alpha,
            lambda,
            seeds,
            train_fraction,
            val_fraction,
            refresh_every,
            high_level_ce,
            theta_lr,
            theta_iterations,
            robustness_ratios,
            alpha_grid,
            lambda_grid,
            k_grid
        );
        if self.norm_cap.is_some() {
            cfg.norm_cap = self.norm_cap;
        }
        cfg.ablation.no_gsl |= self.no_gsl;
        cfg.ablation.no_he |= self.no_he;
        cfg.ablation.rf |= self.rf;
        cfg.ablation.wrf |= self.wrf;
        if let Some(m) = self.knn_mode {
            cfg.knn_mode = match m {
                KnnArg::Exact => KnnMode::Exact,
                KnnArg::Lsh => KnnMode::Lsh {
                    batch_size: 64,
                    num_hashes: 8,
                    num_tables: 4,
                    seed: 0,
                },
            };
        }
        if let Some(o) = self.theta_optimizer {
            cfg.theta_optimizer = match o {
                OptimizerArg::PlainGd => ThetaOptimizer::PlainGd,
                OptimizerArg::Adaptive => ThetaOptimizer::Adaptive,
            };
        }
        if let Some(t) = self.theta_nodes {
            cfg.theta_nodes = match t {
                ThetaNodesArg::Validation => ThetaNodes::Validation,
                ThetaNodesArg::TrainValidation => ThetaNodes::TrainValidation,
            };
        }
        if let Some(modes) = &self.robustness_modes {
            cfg.robustness_modes = modes.iter().map(|m| m.parse::<PerturbMode>()).collect::<Result<_, _>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(report: &Report) {
    for s in &report.summaries {
        match s.std {
            Some(sd) => println!("{:<10} {:<14} {:.4} ± {:.4} ({} runs)", s.method, s.setting, s.mean, sd, s.runs),
            None => println!("{:<10} {:<14} {:.4} ({} run)", s.method, s.setting, s.mean, s.runs),
        }
    }
    if let Some(spread) = report.spread {
        println!("spread {spread:.4}");
    }
    println!("{:.1}s", report.seconds);
}

fn print_theory(theory: &TheoryReport) {
    for c in &theory.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {} observed={:.6e} bound={:.6e}", c.name, c.observed, c.bound);
    }
}

fn write(report: &Report, out: &Path) -> anyhow::Result<()> {
    report.write(out).with_context(|| format!("writing report to {}", out.display()))?;
    print_report(report);
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.config()?;
            let mut report = run(&cfg)?;
            if !common.no_theory {
                let theory = verify_theory(None, cfg.seeds[0])?;
                print_theory(&theory);
                report.theory = Some(theory);
            }
            write(&report, &common.out)
        }
        Command::Robustness(common) => {
            let cfg = common.config()?;
            let report = robustness_sweep(&cfg, &cfg.robustness_ratios, &cfg.robustness_modes)?;
            write(&report, &common.out)
        }
        Command::Sensitivity { param, common } => {
            let cfg = common.config()?;
            let (param, grid) = match param {
                Param::Alpha => (SweepParam::Alpha, cfg.alpha_grid.clone()),
                Param::Lambda => (SweepParam::Lambda, cfg.lambda_grid.clone()),
                Param::K => (SweepParam::K, cfg.k_grid.iter().map(|&k| k as f64).collect()),
            };
            let report = sensitivity_sweep(&cfg, param, &grid)?;
            write(&report, &common.out)
        }
        Command::Ablation(common) => {
            let cfg = common.config()?;
            write(&ablation_suite(&cfg)?, &common.out)
        }
        Command::FusionCompare(common) => {
            let cfg = common.config()?;
            write(&fusion_vs_addition(&cfg)?, &common.out)
        }
        Command::VerifyTheory { trained, common } => {
            let cfg = common.config()?;
            let theory = if trained {
                theory_on_config(&cfg)?
            } else {
                verify_theory(None, cfg.seeds[0])?
            };
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            theory.save(&common.out.join("theory_report.json"))?;
            print_theory(&theory);
            Ok(())
        }
        Command::GenData { split_seed, common } => {
            let cfg = common.config()?;
            let spec: SyntheticSpec = match &cfg.data {
                DataSource::Synthetic(spec) => spec.clone(),
                DataSource::Directory { .. } => {
                    return Err(CoeError::Invalid("gen-data needs a synthetic data source".into()).into())
                }
            };
            let (net, labels) = generate_synthetic(&spec)?;
            let split = split_seed
                .map(|s| split_nodes(net.num_nodes, cfg.train_fraction, cfg.val_fraction, s))
                .transpose()?;
            save_multiplex(&common.out, &net, &labels, split.as_ref())?;
            println!(
                "wrote {} nodes, {} layers to {}",
                net.num_nodes,
                net.num_layers(),
                common.out.display()
            );
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoeError>() {
        Some(e) if e.is_divergence() => 3,
        Some(e) if is_validation(e) => 2,
        _ => 1,
    }
}

fn is_validation(e: &CoeError) -> bool {
    match e {
        CoeError::Invalid(_) | CoeError::Shape(_) | CoeError::Parse { .. } | CoeError::Json { .. } => true,
        CoeError::MissingFile(_) => true,
        CoeError::Stage { source, .. } => is_validation(source),
        _ => false,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match err.downcast_ref::<CoeError>() {
                Some(e) => eprintln!("error: {e}"),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
