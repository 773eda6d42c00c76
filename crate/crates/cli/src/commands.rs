use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use eraserelu_core::arch::{build_network, summarize, to_after_activation, validate, Activation, ArchGraph, BuildOptions, Family};
use eraserelu_core::erase::{apply_erase, Location};
use eraserelu_core::io::write_atomic;
use eraserelu_core::shatter::{self, svg, SweepConfig};
use eraserelu_core::train::{train, TrainConfig};
use eraserelu_core::verify::{run_gradcheck_suite, GRADCHECK_TOLERANCE};
use eraserelu_core::{Error, Result};

/// Exit status of `gradcheck` when a primitive fails.
const GRADCHECK_FAILED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "eraserelu", version, about = "Build, rewrite, train and analyze EraseReLU networks")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActivationArg {
    Relu,
    PreluAll,
    PreluSum,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::PreluAll => Activation::PreluAll,
            ActivationArg::PreluSum => Activation::PreluSum,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LocationArg {
    Last,
    First,
}

impl From<LocationArg> for Location {
    fn from(l: LocationArg) -> Self {
        match l {
            LocationArg::Last => Location::Last,
            LocationArg::First => Location::First,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an architecture graph.
    Build {
        #[arg(long)]
        family: String,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, value_enum, default_value = "relu")]
        activation: ActivationArg,
        #[arg(long, default_value_t = 10)]
        num_classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Erase the ReLUs of a proportion of modules.
    Transform {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        proportion: f64,
        #[arg(long, value_enum, default_value = "last")]
        location: LocationArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Print layer, ReLU, parameter and multiply-add counts.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train from a TOML config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Gradient-shattering depth sweep on scalar networks.
    Analyze {
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        width: usize,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a heatmap and a histogram per cell.
        #[arg(long)]
        svg: bool,
    },
    /// Finite-difference check of every primitive.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn read_graph(path: &Path) -> Result<ArchGraph> {
    let g = ArchGraph::read(path)?;
    if let Some(v) = validate(&g).first() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("invalid graph: {v}"),
        });
    }
    Ok(g)
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Build {
            family,
            depth,
            activation,
            num_classes,
            out,
        } => {
            let family = Family::parse(&family, depth)?;
            let g = build_network(
                family,
                BuildOptions {
                    num_classes,
                    activation: activation.into(),
                },
            )?;
            write_atomic(&out, g.to_json().as_bytes())?;
            wrote(&out);
        }
        Command::Transform {
            input,
            proportion,
            location,
            out,
            plan,
        } => {
            let mut g = read_graph(&input)?;
            if g.style == eraserelu_core::arch::Style::PreActivation {
                g = to_after_activation(&g)?.0;
                eprintln!("notice: {} converted to after-activation form before erasing", g.family);
            }
            let (erased, p) = apply_erase(&g, proportion, location.into())?;
            write_atomic(&out, erased.to_json().as_bytes())?;
            wrote(&out);
            if let Some(plan) = plan {
                write_atomic(&plan, p.to_json().as_bytes())?;
                wrote(&plan);
            }
        }
        Command::Summarize { input } => {
            print!("{}", summarize(&read_graph(&input)?)?.to_key_values());
        }
        Command::Train { config, seed } => {
            let mut cfg = TrainConfig::read(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = train(&cfg)?;
            wrote(&outcome.metrics_path);
            wrote(&outcome.checkpoint_path);
            if let Some(top1) = outcome.final_test_top1() {
                println!("final_test_top1={top1}");
            }
        }
        Command::Analyze {
            depths,
            replicates,
            seed,
            width,
            points,
            out,
            svg: with_svg,
        } => {
            let mut cfg = SweepConfig::new(depths, replicates, seed);
            cfg.width = width;
            cfg.grid.points = points;
            let cells = shatter::run_depth_sweep(&cfg)?;
            let csv = out.join("shatter.csv");
            write_atomic(&csv, shatter::sweep_csv(&cells).as_bytes())?;
            wrote(&csv);
            for cell in &cells {
                let tag = format!("d{}-{}", cell.depth, if cell.erase { "erased" } else { "baseline" });
                let report = match &cell.report {
                    Ok(r) => r,
                    Err(e) => {
                        eprintln!("warning: cell {tag} failed: {e}");
                        continue;
                    }
                };
                let json = out.join(format!("report-{tag}.json"));
                let text = serde_json::to_string(report).map_err(|e| Error::Contract(e.to_string()))?;
                write_atomic(&json, text.as_bytes())?;
                wrote(&json);
                if with_svg {
                    let cov = &report.covariance;
                    let heat = out.join(format!("corr-{tag}.svg"));
                    let title = format!("gradient correlation, {tag}, mean |rho| {:.3}", cov.mean_abs_offdiag_corr);
                    write_atomic(&heat, svg::heatmap(&cov.corr_matrix, cov.retained.len(), &title).as_bytes())?;
                    wrote(&heat);
                    let hist = out.join(format!("rates-{tag}.svg"));
                    let title = format!("activation rates, {tag}, bimodality {:.3}", report.bimodality_index);
                    write_atomic(&hist, svg::histogram(&report.activation_rates, 20, &title).as_bytes())?;
                    wrote(&hist);
                }
            }
        }
        Command::Gradcheck { instances, seed } => {
            let entries = run_gradcheck_suite(instances, seed)?;
            let mut ok = true;
            for e in &entries {
                let status = if e.passes() { "ok" } else { "FAIL" };
                ok &= e.passes();
                println!(
                    "{} max_rel_err={:.3e} checked={} skipped={} {status}",
                    e.op, e.result.max_relative_error, e.result.checked, e.result.skipped
                );
            }
            if !ok {
                eprintln!("error: gradcheck failed: relative error above {GRADCHECK_TOLERANCE:e}");
                return Ok(GRADCHECK_FAILED);
            }
        }
    }
    Ok(0)
}
