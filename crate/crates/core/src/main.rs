//! `cgd` command line: single runs and parameter sweeps.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgd::harness::{self, RunConfig, SweepAxis};
use cgd::privacy::{self, AuditConfig};

#[derive(Parser)]
#[command(name = "cgd", version, about = "Confined gradient descent experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write the metrics CSV.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// One run per value along an axis, merged into a single CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// delta, mu, or grid.
        #[arg(long)]
        axis: String,
        /// Values separated by `;` (grid values like `4x2;10x7`).
        #[arg(long, allow_hyphen_values = true)]
        values: String,
    },
    /// Privacy audit of recorded transcripts on a synthetic federation.
    Audit {
        #[arg(long, default_value_t = 5)]
        participants: u16,
        #[arg(long, default_value_t = 50)]
        rounds: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Print the verdict as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Preset applied before the config file and flags: desk or paper.
    #[arg(long)]
    profile: Option<String>,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// cgd, centralized, local, fedsgd-plain, or fedsgd-secure.
    #[arg(long)]
    mode: Option<String>,
    /// Grid as MHxMV.
    #[arg(long)]
    grid: Option<String>,
    /// Scalar, comma-separated per-participant list, or uniform-random(lo,hi).
    #[arg(long)]
    delta: Option<String>,
    /// Per-participant scales drawn uniformly from LO:HI.
    #[arg(long, value_name = "LO:HI")]
    delta_random: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    hidden: Option<String>,
    /// mnist or synth.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    mnist_dir: Option<String>,
    /// local or tcp.
    #[arg(long)]
    transport: Option<String>,
    /// Endpoint file, one `id host:port` per line.
    #[arg(long)]
    endpoints: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    frac_bits: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    /// Arbitrary `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Metrics CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, String> {
        let mut o = Vec::new();
        let flags = [
            ("mode", &self.mode),
            ("grid", &self.grid),
            ("delta", &self.delta),
            ("alpha", &self.alpha),
            ("mu", &self.mu),
            ("iters", &self.iters),
            ("hidden", &self.hidden),
            ("dataset", &self.dataset),
            ("mnist_dir", &self.mnist_dir),
            ("transport", &self.transport),
            ("endpoints", &self.endpoints),
            ("seed", &self.seed),
            ("frac_bits", &self.frac_bits),
            ("eval_every", &self.eval_every),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                o.push((k.to_string(), v.clone()));
            }
        }
        if let Some(r) = &self.delta_random {
            let (lo, hi) = r.split_once(':').ok_or("--delta-random expects LO:HI")?;
            o.push(("delta".into(), format!("uniform-random({lo},{hi})")));
        }
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(o)
    }

    fn resolve(&self) -> Result<RunConfig, String> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?),
            None => None,
        };
        RunConfig::resolve(self.profile.as_deref(), text.as_deref(), &self.overrides()?).map_err(|e| e.to_string())
    }

    fn emit(&self, csv: &str, summaries: &[String]) -> Result<(), String> {
        match &self.out {
            Some(p) => {
                fs::write(p, csv).map_err(|e| format!("{}: {e}", p.display()))?;
                for s in summaries {
                    println!("{s}");
                }
            }
            None => {
                print!("{csv}");
                let _ = std::io::stdout().flush();
                for s in summaries {
                    eprintln!("{s}");
                }
            }
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { common } => common.resolve().and_then(|cfg| {
            let report = harness::run(&cfg).map_err(|e| e.to_string())?;
            common.emit(&report.csv(), &[report.summary.json()])
        }),
        Command::Sweep { common, axis, values } => common.resolve().and_then(|cfg| {
            let axis: SweepAxis = axis.parse().map_err(|e: cgd::Error| e.to_string())?;
            let values: Vec<String> = values
                .split(';')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(str::to_string)
                .collect();
            let report = harness::sweep(&cfg, axis, &values);
            let lines: Vec<String> = report
                .runs
                .iter()
                .map(|(v, r)| match r {
                    Ok(s) => s.json(),
                    Err(e) => serde_json::json!({ "sweep": v, "error": e }).to_string(),
                })
                .collect();
            common.emit(&report.csv, &lines)
        }),
        Command::Audit {
            participants,
            rounds,
            seed,
            json,
        } => {
            let cfg = AuditConfig {
                participants,
                rounds,
                seed,
                ..AuditConfig::default()
            };
            privacy::audit(&cfg).map_err(|e| e.to_string()).and_then(|v| {
                if json {
                    println!("{}", v.json());
                } else {
                    print!("{}", v.text());
                }
                if v.pass {
                    Ok(())
                } else {
                    Err("privacy audit failed".into())
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
