//! Command-line front end for the experiment runner.
//!
//! Exit codes: 0 on success, 2 on a config or usage error, 3 when the run
//! itself fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qvoter::experiments::{run_and_write, validate_config_with, ExperimentError};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "qvoter", version, about = "q-voter model experiments on the 3-d torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand; they override the config.
#[derive(Args, Debug, Default)]
struct Common {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replicate count; scientific notation such as 1e5 is accepted.
    #[arg(long)]
    replicates: Option<String>,
    /// Worker threads (0 = one per core). Never changes the results.
    #[arg(long)]
    threads: Option<usize>,
}

/// Declares a subcommand whose flags map one-to-one onto config keys.
macro_rules! kind_args {
    ($name:ident, $kind:literal, { $($field:ident => $key:literal),* $(,)? }) => {
        #[derive(Args, Debug)]
        struct $name {
            $(
                #[arg(long = $key, value_name = "VALUE")]
                $field: Option<String>,
            )*
            #[command(flatten)]
            common: Common,
        }

        impl $name {
            fn overrides(&self) -> (Map<String, Value>, &Common) {
                let mut map = Map::new();
                map.insert("kind".into(), Value::String($kind.into()));
                $(
                    if let Some(v) = &self.$field {
                        map.insert($key.into(), parse_value(v));
                    }
                )*
                (map, &self.common)
            }
        }
    };
}

kind_args!(PersistenceArgs, "persistence", {
    l => "L", offsets => "offsets", q => "q", u0 => "u0", horizon => "horizon",
    transient => "transient", band => "band", sample_dt => "sample_dt",
});
kind_args!(ExtinctionArgs, "extinction", {
    l => "L", offsets => "offsets", q => "q", u0 => "u0", t_max_per_site => "t_max_per_site",
});
kind_args!(DualityArgs, "duality-check", {
    l => "L", offsets => "offsets", t => "t", a => "A", b => "B",
});
kind_args!(ReactionArgs, "reaction-term", {
    k => "k", offsets => "offsets", regime => "regime", t_trunc => "t_trunc",
    drift_u => "drift_u", drift_l => "drift_L", burn => "burn", configs => "configs",
});
kind_args!(OdeArgs, "ode-compare", {
    l => "L", offsets => "offsets", regime => "regime", epsilon => "epsilon",
    epsilon_exponent => "epsilon_exponent", u0 => "u0", t0 => "t0", dt => "dt",
    t_trunc => "t_trunc", fate_replicates => "fate_replicates",
});
kind_args!(BoxArgs, "box-clt", {
    l => "L", offsets => "offsets", r => "r", lambda => "lambda", burn => "burn",
    sampler => "sampler", control => "control",
});
kind_args!(GreensArgs, "greens", {
    x => "x", z => "z", rate => "rate",
});
kind_args!(SnapshotArgs, "snapshot", {
    l => "L", offsets => "offsets", q => "q", u0 => "u0", t => "t", axis => "axis",
    level => "level", sample_dt => "sample_dt",
});

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Density occupancy near 1/2 for q < 1 across lattice sizes.
    Persistence(PersistenceArgs),
    /// Absorption times for q > 1 across lattice sizes.
    Extinction(ExtinctionArgs),
    /// Forward and dual estimates of the voter duality identity.
    #[command(alias = "duality-check")]
    Duality(DualityArgs),
    /// Coalescence fates and the factored reaction term.
    #[command(alias = "reaction-term")]
    Reaction(ReactionArgs),
    /// Particle densities against the limiting ODE.
    OdeCompare(OdeArgs),
    /// Box-sum variance scaling of voter equilibria.
    BoxClt(BoxArgs),
    /// Expected hitting time of the time-changed walk.
    Greens(GreensArgs),
    /// Cross-section of a single long run.
    Snapshot(SnapshotArgs),
}

/// Numbers, booleans and JSON arrays are parsed; a bare `a,b,c` becomes a
/// list; anything else is kept as a string.
fn parse_value(s: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(s) {
        return v;
    }
    if s.contains(',') {
        if let Ok(v) = serde_json::from_str::<Value>(&format!("[{s}]")) {
            return v;
        }
    }
    Value::String(s.to_string())
}

fn apply_common(map: &mut Map<String, Value>, common: &Common) {
    if let Some(seed) = common.seed {
        map.insert("seed".into(), seed.into());
    }
    if let Some(out) = &common.out {
        map.insert("out".into(), Value::String(out.display().to_string()));
    }
    if let Some(r) = &common.replicates {
        map.insert("replicates".into(), parse_value(r));
    }
    if let Some(t) = common.threads {
        map.insert("threads".into(), t.into());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (text, mut overrides, common) = match &cli.command {
        Command::Run { config, common } => match std::fs::read_to_string(config) {
            Ok(text) => (text, Map::new(), common),
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", config.display());
                return ExitCode::from(2);
            }
        },
        Command::Persistence(a) => with_empty(a.overrides()),
        Command::Extinction(a) => with_empty(a.overrides()),
        Command::Duality(a) => with_empty(a.overrides()),
        Command::Reaction(a) => with_empty(a.overrides()),
        Command::OdeCompare(a) => with_empty(a.overrides()),
        Command::BoxClt(a) => with_empty(a.overrides()),
        Command::Greens(a) => with_empty(a.overrides()),
        Command::Snapshot(a) => with_empty(a.overrides()),
    };
    apply_common(&mut overrides, common);
    let config = match validate_config_with(&text, overrides) {
        Ok(c) => c,
        Err(errors) => {
            for e in &errors.0 {
                eprintln!("config error: {e}");
            }
            return ExitCode::from(2);
        }
    };
    match run_and_write(&config) {
        Ok(record) => {
            for (name, value) in &record.metrics {
                println!("{name} = {value}");
            }
            println!(
                "wrote {} files to {}",
                record.files.len() + 1,
                config.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(ExperimentError::Config(errors)) => {
            eprintln!("config error: {errors}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn with_empty((map, common): (Map<String, Value>, &Common)) -> (String, Map<String, Value>, &Common) {
    (String::new(), map, common)
}
