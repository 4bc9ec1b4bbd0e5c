use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};

use proxsim::scenario::{self, ConfigError, RunError, Scenario};
use proxsim::service::server::{self, Clock};
use proxsim::service::Service;
use proxsim::world::{self, World};

#[derive(Parser)]
#[command(name = "proxsim", version, about = "Location-proximity privacy attack simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; beats PROXSIM_OUT_DIR and the file's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a setting, e.g. `--set quantum_m=100`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Serve the scenario's world over TCP until ctrl-c.
    Serve {
        config: PathBuf,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Run the scenario once per value of one parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn load(config: &Path, sets: &[String], seed: Option<u64>) -> Result<Scenario, ConfigError> {
    let mut overrides = sets.iter().map(|s| scenario::parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    Scenario::load(config, &overrides)
}

fn out_dir(s: &Scenario, out: Option<&PathBuf>) -> PathBuf {
    let env = std::env::var(scenario::OUT_DIR_ENV).ok();
    scenario::resolve_out_dir(s, out.map(|p| p.as_path()), env.as_deref())
}

fn serve(s: &Scenario, host: &str, port: u16) -> Result<(), RunError> {
    let pop = world::generate(&s.world).map_err(|e| RunError::Io(e.to_string()))?;
    let w = World::new(pop, s.policy, s.seed).map_err(|e| RunError::Io(e.to_string()))?;
    let mut service = Service::new(w, s.service);
    let born = NaiveDate::from_ymd_opt(1960, 1, 1).expect("valid date");
    let token = service
        .register("Mallory", born, s.world.bbox.center(), BTreeSet::new())
        .map_err(|e| RunError::Io(e.to_string()))?;
    let clock = if s.clock_scale > 0.0 {
        Clock::Realtime { scale: s.clock_scale }
    } else {
        Clock::Frozen
    };
    let addr = format!("{host}:{port}");
    server::run_until_ctrl_c(service, &addr, clock, |bound| {
        println!("listening on {bound}");
        println!("attacker token {token}");
    })
    .map_err(|e| RunError::Io(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run { config, seed, out, sets } => load(config, sets, *seed).map_err(RunError::from).and_then(|s| {
            let dir = out_dir(&s, out.as_ref());
            let metrics = scenario::run_into(&s, &dir)?;
            for (k, v) in metrics {
                println!("{k} = {v}");
            }
            println!("wrote {}", dir.display());
            Ok(())
        }),
        Cmd::Serve { config, port, host, sets } => load(config, sets, None).map_err(RunError::from).and_then(|s| serve(&s, host, *port)),
        Cmd::Sweep {
            config,
            param,
            values,
            parallel,
            out,
            sets,
        } => load(config, sets, None).map_err(RunError::from).and_then(|s| {
            let dir = out_dir(&s, out.as_ref());
            scenario::sweep(&s, param, values, &dir, *parallel)?;
            println!("wrote {}", dir.join("sweep.csv").display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("proxsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
