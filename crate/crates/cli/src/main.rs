use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vrb_core::dynamics::inertia;
use vrb_core::guidance::GuidanceDesign;
use vrb_core::output::write_log;
use vrb_core::scenario::{bundled_names, dump_scenario, load_text, parse_with_overrides, Scenario, ScenarioError};
use vrb_core::sim::{momentum_energy_audit, run_mission, Outcome, SimLog};

const EXIT_INVALID: u8 = 1;
const EXIT_MISSION: u8 = 2;

/// Virtual rigid body formation missions.
#[derive(Parser)]
#[command(name = "vrbsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ScenarioArgs {
    /// Bundled scenario name or path to a TOML file.
    scenario: String,
    /// Override a field by dotted path, e.g. `constraints.gains.alpha=3`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Time step (s).
    #[arg(long)]
    dt: Option<f64>,
    /// End time (s).
    #[arg(long = "t-end")]
    t_end: Option<f64>,
}

impl ScenarioArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(dt) = self.dt {
            o.push(format!("sim.dt={dt}"));
        }
        if let Some(t) = self.t_end {
            o.push(format!("sim.t_end={t}"));
        }
        o
    }

    fn load(&self, extra: &[String]) -> Result<Scenario, ScenarioError> {
        let text = load_text(&self.scenario)?;
        let mut o = self.overrides();
        o.extend_from_slice(extra);
        parse_with_overrides(&text, &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a mission and write CSV logs.
    Run {
        #[command(flatten)]
        args: ScenarioArgs,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Validate a scenario, report rigidity and gain solvability.
    Check {
        #[command(flatten)]
        args: ScenarioArgs,
    },
    /// Run one mission per value of a parameter, in parallel.
    Sweep {
        #[command(flatten)]
        args: ScenarioArgs,
        /// Dotted path of the swept field.
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Print the normalized scenario with all defaults filled in.
    Dump {
        #[command(flatten)]
        args: ScenarioArgs,
    },
    /// List bundled scenarios.
    List,
}

fn summary(log: &SimLog) -> String {
    let mut s = String::new();
    match &log.outcome {
        Outcome::Completed => s += "outcome: completed\n",
        Outcome::Timeout => s += "outcome: timeout\n",
        Outcome::Failed(e) => s += &format!("outcome: failed ({e})\n"),
    }
    if let Some(t) = log.established_at {
        s += &format!("established at {t:.2} s\n");
    }
    for (label, t) in log.waypoint_labels.iter().zip(&log.waypoint_times) {
        match t {
            Some(t) => s += &format!("waypoint {label}: reached at {t:.2} s\n"),
            None => s += &format!("waypoint {label}: not reached\n"),
        }
    }
    if let Some(row) = log.last() {
        let e = row.euler_deg();
        s += &format!(
            "final t {:.2} s, r_cm [{:.4}, {:.4}, {:.4}] m, euler [{:.3}, {:.3}, {:.3}] deg, max |c| {:.2e} m\n",
            row.t,
            row.r_cm.x,
            row.r_cm.y,
            row.r_cm.z,
            e.x,
            e.y,
            e.z,
            row.max_abs_c()
        );
    }
    let audit = momentum_energy_audit(log);
    s += &format!(
        "peak input {:.3} N (budget {:.1} N), max |sum f_C| {:.2e} N\n",
        audit.peak_input(),
        audit.budget,
        audit.max_net_fc
    );
    s
}

fn mission_code(log: &SimLog) -> u8 {
    match log.outcome {
        Outcome::Completed => 0,
        _ => EXIT_MISSION,
    }
}

fn run(args: &ScenarioArgs, out: &Path, extra: &[String]) -> Result<u8> {
    let scenario = match args.load(extra) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_INVALID);
        }
    };
    let log = run_mission(&scenario);
    write_log(&log, out).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", summary(&log));
    if let Outcome::Failed(e) = &log.outcome {
        eprintln!("error: {e}");
    }
    Ok(mission_code(&log))
}

fn check(args: &ScenarioArgs) -> u8 {
    let scenario = match args.load(&[]) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let report = match scenario.rigidity() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    println!("scenario {}: {} agents, {} constraints", scenario.name, scenario.agents.len(), report.constraints);
    println!(
        "rank {} / required {}, rigid: {}{}",
        report.rank,
        report.required,
        if report.is_rigid { "yes" } else { "no" },
        if scenario.partial { " (partial)" } else { "" }
    );
    let sys = scenario.initial_particles();
    let cm = sys.center_of_mass();
    let rel: Vec<_> = (0..sys.len()).map(|i| sys.pos(i) - cm).collect();
    let i_cm = inertia(&rel, &vec![Default::default(); rel.len()], &sys.masses).i_cm_b;
    let ctl = &scenario.control;
    match GuidanceDesign::new(
        ctl.translation,
        ctl.attitude,
        sys.total_mass(),
        &i_cm,
        scenario.gravity,
        ctl.schedule_threshold,
        ctl.null_axis_rtol,
    ) {
        Ok(d) => {
            let residual = d.all_designs().map(|x| x.care.residual).fold(0.0, f64::max);
            let eig = d.all_designs().map(|x| x.care.max_real_eig).fold(f64::NEG_INFINITY, f64::max);
            println!(
                "gains: {} channels solved, max CARE residual {residual:.2e}, slowest closed-loop pole {eig:.4}",
                d.all_designs().count()
            );
            0
        }
        Err(e) => {
            eprintln!("error: gain design failed: {e}");
            EXIT_INVALID
        }
    }
}

fn sweep(args: &ScenarioArgs, param: &str, values: &[String], out: &Path) -> Result<u8> {
    let results: Vec<Result<u8>> = std::thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .map(|v| {
                let dir = out.join(format!("{param}={v}"));
                let extra = vec![format!("{param}={v}")];
                scope.spawn(move || -> Result<u8> {
                    let scenario = match args.load(&extra) {
                        Ok(s) => s,
                        Err(e) => {
                            eprintln!("{param}={v}: error: {e}");
                            return Ok(EXIT_INVALID);
                        }
                    };
                    let log = run_mission(&scenario);
                    write_log(&log, &dir).with_context(|| format!("writing {}", dir.display()))?;
                    let outcome = match &log.outcome {
                        Outcome::Completed => "completed".to_string(),
                        Outcome::Timeout => "timeout".to_string(),
                        Outcome::Failed(e) => format!("failed ({e})"),
                    };
                    println!("{param}={v}: {outcome}");
                    Ok(mission_code(&log))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut code = 0;
    for r in results {
        code = code.max(r?);
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { args, out } => run(args, out, &[]),
        Command::Check { args } => Ok(check(args)),
        Command::Sweep { args, param, values, out } => sweep(args, param, values, out),
        Command::Dump { args } => match args.load(&[]) {
            Ok(s) => {
                print!("{}", dump_scenario(&s));
                Ok(0)
            }
            Err(e) => {
                eprintln!("error: {e}");
                Ok(EXIT_INVALID)
            }
        },
        Command::List => {
            for n in bundled_names() {
                println!("{n}");
            }
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_MISSION)
        }
    }
}
