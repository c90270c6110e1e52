use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use jamalert_core::control::ControllerKind;
use jamalert_core::experiment::{self, Overrides};
use jamalert_core::protocol::Variant;
use jamalert_core::scenario::Scenario;

#[derive(Parser)]
#[command(name = "jamalert", version, about = "Run congestion-alert traffic scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write summary.json and events.csv.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_controller)]
        controller: Option<ControllerKind>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one scenario per controller with a shared seed.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Repeat for each column; defaults to fixed and alert_enabled.
        #[arg(long, value_parser = parse_controller)]
        controller: Vec<ControllerKind>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Run the controllers on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Parse and validate a scenario without running it.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Bundled scenario name or path to a TOML file.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    horizon: Option<f64>,
}

impl Common {
    fn load(&self, controller: Option<ControllerKind>) -> Result<Scenario> {
        let mut sc = Scenario::load(&self.scenario)?;
        Overrides {
            seed: self.seed,
            variant: self.variant,
            controller,
            horizon: self.horizon,
        }
        .apply(&mut sc);
        sc.validate()?;
        Ok(sc)
    }
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    ControllerKind::parse(s).ok_or_else(|| format!("unknown controller `{s}` (fixed, adaptive_baseline, alert_enabled)"))
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s.to_ascii_lowercase().as_str() {
        "s1" => Ok(Variant::S1),
        "s2" => Ok(Variant::S2),
        _ => Err(format!("unknown variant `{s}` (s1, s2)")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, controller, out } => {
            let sc = common.load(controller)?;
            let output = experiment::run(&sc)?;
            experiment::write_outputs(&out, &output).with_context(|| format!("writing {}", out.display()))?;
            let s = &output.summary;
            println!(
                "{} seed={} {:?}/{}: {} vehicles, mean delay {:.2} s, {} true / {} false alerts, {} commands",
                s.scenario,
                s.seed,
                s.variant,
                s.controller.name(),
                s.vehicles.spawned,
                s.delay.mean,
                s.true_alerts,
                s.false_alerts,
                s.commands.len()
            );
            for i in &s.incidents {
                if let Some(l) = i.latency {
                    println!("incident on segment {} lane {}: alert after {:.1} s", i.rid, i.lid, l);
                }
            }
        }
        Command::Compare {
            common,
            mut controller,
            out,
            parallel,
        } => {
            if controller.is_empty() {
                controller = vec![ControllerKind::Fixed, ControllerKind::AlertEnabled];
            }
            if controller.len() < 2 {
                bail!("compare needs at least two controllers");
            }
            let sc = common.load(None)?;
            let (cmp, outputs) = experiment::compare(&sc, &controller, parallel)?;
            for (i, (c, o)) in controller.iter().zip(&outputs).enumerate() {
                let dir = out.join(format!("{i}-{}", c.name()));
                experiment::write_outputs(&dir, o).with_context(|| format!("writing {}", dir.display()))?;
            }
            std::fs::create_dir_all(&out)?;
            let mut json = serde_json::to_string_pretty(&cmp)?;
            json.push('\n');
            std::fs::write(out.join("comparison.json"), json)?;
            println!("{:<20} {:>12} {:>10} {:>8} {:>8}", "controller", "mean delay", "delta", "alerts", "false");
            for (r, d) in cmp.results.iter().zip(&cmp.mean_delay_delta) {
                println!(
                    "{:<20} {:>12.2} {:>+10.2} {:>8} {:>8}",
                    r.controller.name(),
                    r.mean_delay,
                    d,
                    r.true_alerts + r.false_alerts,
                    r.false_alerts
                );
            }
        }
        Command::Validate { common } => {
            let sc = common.load(None)?;
            let layout = sc.layout()?;
            println!(
                "{}: ok ({} segments, {} intersections, {} RSUs, hash {})",
                sc.name,
                layout.net.segments.len(),
                layout.lbs.len(),
                layout.rsus.len(),
                experiment::config_hash(&sc)
            );
        }
    }
    Ok(())
}
