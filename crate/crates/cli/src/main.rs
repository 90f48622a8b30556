use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rnddpc::control::ControllerKind;
use rnddpc::harness::{paths, run_infeasibility_dominated, verify_suite, HarnessError, Pipeline, RunConfig, ScenarioKind};
use rnddpc::platoon::AttackMode;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "rnddpc", version, about = "Tube-based predictive control of a CAV leading human-driven vehicles, from learned lifted models")]
struct Cli {
    /// TOML run configuration (dotted keys); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration and RNDDPC_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record an excitation run of the true platoon.
    Collect,
    /// Train the lifted model and the identity-lift baseline.
    Train,
    /// Learn the model sets and write the tightness reports.
    LearnSets,
    /// Closed-loop runs; missing or stale offline artifacts are rebuilt first.
    Run {
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
        /// Controller to run; repeat for several. Defaults to the configuration.
        #[arg(long = "controller", value_parser = parse_controller)]
        controllers: Vec<ControllerKind>,
        #[arg(long, value_enum)]
        attack: Option<Attack>,
        /// Largest delay in steps for `--attack delay`.
        #[arg(long, default_value_t = 6)]
        max_tau: usize,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Aggregate every trajectory log in the output directory.
    Report,
    /// Quick randomized self-checks.
    Verify,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    Emergency,
    Cycle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Attack {
    None,
    Random,
    Delay,
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    ControllerKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = ControllerKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown controller {s:?}; expected one of {}", names.join(", "))
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.resolve_out_dir(cli.out.clone());
    Ok(cfg)
}

fn apply_run_flags(cfg: &mut RunConfig, cmd: &Command) -> Result<(), HarnessError> {
    if let Command::Run {
        scenario,
        controllers,
        attack,
        max_tau,
        episodes,
        workers,
    } = cmd
    {
        if let Some(s) = scenario {
            cfg.scenario.kind = match s {
                Scenario::Emergency => ScenarioKind::Emergency,
                Scenario::Cycle => ScenarioKind::Cycle,
            };
        }
        if !controllers.is_empty() {
            cfg.controllers = controllers.clone();
        }
        if let Some(a) = attack {
            cfg.scenario.attack = match a {
                Attack::None => AttackMode::None,
                Attack::Random => AttackMode::Random {
                    theta_max: cfg.platoon.bounds.theta_max,
                },
                Attack::Delay => AttackMode::Delay { max_tau: *max_tau },
            };
        }
        if let Some(e) = episodes {
            cfg.episodes = *e;
        }
        if let Some(w) = workers {
            cfg.workers = *w;
        }
    }
    cfg.validate()
}

fn execute(cli: &Cli) -> Result<u8, HarnessError> {
    let mut cfg = load_config(cli)?;
    apply_run_flags(&mut cfg, &cli.command)?;
    let out = cfg.out_dir.clone();
    let pipe = Pipeline::new(cfg);
    match &cli.command {
        Command::Collect => {
            let log = pipe.collect()?;
            println!("collected {} transitions (seed {}) -> {}", log.transitions(), log.meta.seed, out.join(paths::DATA).display());
        }
        Command::Train => {
            let tm = pipe.train()?;
            let log = pipe.load_data()?;
            let (k, i) = tm.test_rmse(&log);
            println!(
                "trained {} epochs (best {}), held-out one-step RMSE {k:.5}, identity lift {i:.5} -> {}",
                tm.report.epochs_run,
                tm.report.best_epoch,
                out.join(paths::MODEL).display()
            );
        }
        Command::LearnSets => {
            let [t, ti] = pipe.learn_sets()?;
            for (name, r) in [("lifted", t), ("identity", ti)] {
                let s = r.summary();
                println!(
                    "{name} model sets: [A B H J] margins +{:.4e}/{:.4e}, C margins +{:.4e}/{:.4e}, signs {}",
                    s.abhj_sup_max,
                    s.abhj_inf_min,
                    s.c_sup_max,
                    s.c_inf_min,
                    if r.signs_ok() { "ok" } else { "VIOLATED" }
                );
            }
            println!("-> {}", out.join(paths::SETS).display());
        }
        Command::Run { .. } => {
            if pipe.ensure_offline()? {
                println!("built offline artifacts in {}", out.display());
            }
            let runs = pipe.run()?;
            let mut dominated = false;
            for (log, m) in &runs {
                dominated |= run_infeasibility_dominated(m);
                println!(
                    "{} {} seed {}: R_v {:.4} R_s {:.4} R_c {:.4} R_t {:.3} ms, feasible {:.3}, {} exceptions",
                    m.controller,
                    m.scenario,
                    m.seed,
                    m.r_v,
                    m.r_s,
                    m.r_c,
                    m.r_t,
                    m.feasible_fraction,
                    log.meta.exceptions.len()
                );
            }
            println!("-> {}", out.join(paths::RUNS).display());
            if dominated {
                eprintln!("infeasibility-dominated run(s): the backup input was applied on most steps");
                return Ok(EXIT_INFEASIBLE);
            }
        }
        Command::Report => {
            let rep = pipe.report()?;
            print!("{}", rep.to_markdown());
            println!("-> {}", out.join(paths::REPORT_MD).display());
        }
        Command::Verify => {
            let checks = verify_suite(pipe.cfg.seed);
            let mut ok = true;
            for c in &checks {
                ok &= c.passed;
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !ok {
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_FAILURE })
        }
    }
}
