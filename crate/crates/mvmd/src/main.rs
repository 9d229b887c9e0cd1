use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvmd::commands::{self, Globals, OccupationArgs, Outcome};
use mvmd::io::Format;
use mvmd::{run_campaign, CampaignOptions, RunError};

/// Two-time-scale McKean–Vlasov SDEs: averaging, moderate deviations and
/// the experiment campaigns that probe them.
#[derive(Parser)]
#[command(name = "mvmd", version)]
struct Cli {
    /// Base seed; overrides the `seed` key of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0: all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe the model assumptions and write validation.json.
    Validate { model: PathBuf },
    /// Frozen invariant law and averaged drift at x; X̄ when [grid] is set.
    Average {
        model: PathBuf,
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Poisson cell solution and ∂yΦ·g at (x, y).
    Poisson {
        model: PathBuf,
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        x: Option<Vec<f64>>,
        #[arg(long, num_args = 1.., allow_negative_numbers = true, required = true)]
        y: Vec<f64>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        replicas: usize,
    },
    /// Rate operator, path rate, endpoint infimum and optimal controls.
    Rate {
        model: PathBuf,
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        z: Option<Vec<f64>>,
        #[arg(long, default_value_t = 9)]
        y_points: usize,
    },
    /// Skeleton path under a constant control h¹.
    Skeleton {
        model: PathBuf,
        #[arg(long, num_args = 1.., allow_negative_numbers = true, required = true)]
        h1: Vec<f64>,
    },
    /// Interacting particle system, optionally under constant controls.
    Simulate {
        model: PathBuf,
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        h1: Option<Vec<f64>>,
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        h2: Option<Vec<f64>>,
    },
    /// Occupation measure of one controlled particle.
    Occupation {
        model: PathBuf,
        #[arg(long, num_args = 1.., allow_negative_numbers = true, default_values_t = [0.0])]
        h1: Vec<f64>,
        #[arg(long, num_args = 1.., allow_negative_numbers = true, default_values_t = [0.0])]
        h2: Vec<f64>,
        #[arg(long, num_args = 2, allow_negative_numbers = true, default_values_t = [-2.5, 3.5])]
        y_range: Vec<f64>,
        #[arg(long, default_value_t = 60)]
        bins: usize,
        #[arg(long, default_value_t = 5)]
        time_bins: usize,
        #[arg(long, default_value_t = 0)]
        particle: usize,
    },
    /// Run every study of a campaign file.
    Study { campaign: PathBuf },
}

fn run(cli: Cli) -> Result<Outcome, RunError> {
    let g = Globals {
        seed: cli.seed,
        out_dir: cli.out_dir,
        threads: cli.threads,
        format: cli.format,
    };
    match cli.command {
        Command::Validate { model } => commands::validate(&model, &g),
        Command::Average { model, x, bins } => commands::average(&model, &g, x, bins),
        Command::Poisson {
            model,
            x,
            y,
            tol,
            replicas,
        } => commands::poisson(&model, &g, x, y, tol, replicas),
        Command::Rate { model, z, y_points } => commands::rate(&model, &g, z, y_points),
        Command::Skeleton { model, h1 } => commands::skeleton(&model, &g, h1),
        Command::Simulate { model, h1, h2 } => commands::simulate(&model, &g, h1, h2),
        Command::Occupation {
            model,
            h1,
            h2,
            y_range,
            bins,
            time_bins,
            particle,
        } => {
            if y_range[0] >= y_range[1] {
                return Err(RunError::Config("--y-range needs lo < hi".into()));
            }
            let a = OccupationArgs {
                h1,
                h2,
                y_range: (y_range[0], y_range[1]),
                bins,
                time_bins,
                particle,
            };
            commands::occupation(&model, &g, &a)
        }
        Command::Study { campaign } => {
            let opts = CampaignOptions {
                seed: g.seed,
                out_dir: g.out_dir.clone(),
                threads: g.threads,
                format: g.format,
            };
            let m = run_campaign(&campaign, &opts)?;
            for s in &m.studies {
                let mark = if s.passed { "pass" } else { "FAIL" };
                println!("{mark} {} ({}, seed {}, {:.1} s)", s.name, s.kind, s.seed, s.wall_clock_s);
                for gate in &s.gates {
                    let obs = gate.observed.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                    println!("    {} {}: {obs} (want {})", if gate.passed { "ok" } else { "no" }, gate.name, gate.expected);
                }
                if let Some(d) = &s.divergence {
                    println!("    diverged: {d}");
                }
            }
            Ok(Outcome {
                outputs: m.outputs.iter().map(|o| g.out_dir.join(o)).collect(),
                exit: m.exit_code(),
            })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(o) => {
            for p in &o.outputs {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::from(o.exit as u8)
        }
        Err(e) => {
            eprintln!("mvmd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
