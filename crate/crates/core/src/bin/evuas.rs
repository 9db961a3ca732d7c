use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use evuas::model::{MODEL_CATALOG, PERTURBATION_CATALOG};
use evuas::norm::Norm;
use evuas::scenario::{
    load_scenario, run_scenario, scenario_dirs_from_env, user_scenarios, Format, Overrides, ScenarioError, Stage, BUNDLED_SCENARIOS,
};
use evuas::signal::SIGNAL_CATALOG;
use evuas::simulate::REFERENCE_CATALOG;

#[derive(Parser)]
#[command(name = "evuas", version, about = "Feedback synthesis, simulation and stability evidence under diminishing perturbations")]
struct Cli {
    /// Extra directory of scenario files (repeatable).
    #[arg(long = "scenario-dir", global = true)]
    scenario_dirs: Vec<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stages listed in a scenario.
    Run(StageArgs),
    /// Window-metric profiles and perturbation classification only.
    Classify(StageArgs),
    /// Controller synthesis only.
    Synthesize(StageArgs),
    /// Simulation only.
    Simulate(StageArgs),
    /// Stability verification only.
    Verify(StageArgs),
    /// Print the model, perturbation, signal, reference and scenario catalogs.
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Euclidean,
    Inf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Svg,
    Json,
}

#[derive(Args)]
struct StageArgs {
    /// Scenario file, user scenario name or bundled scenario name.
    scenario: String,
    /// Output directory (default: the scenario's, else out/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Integrator tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    /// Artifact formats (repeatable or comma separated).
    #[arg(long, value_enum, value_delimiter = ',')]
    format: Vec<FormatArg>,
}

fn scenario_dirs(cli_dirs: &[PathBuf]) -> Vec<PathBuf> {
    let mut dirs = cli_dirs.to_vec();
    dirs.extend(scenario_dirs_from_env(std::env::var("EVUAS_SCENARIO_PATH").ok().as_deref()));
    dirs
}

fn list(dirs: &[PathBuf]) {
    let section = |title: &str, items: &[(&str, &str)]| {
        println!("{title}:");
        for (n, d) in items {
            println!("  {n:<28} {d}");
        }
    };
    section("models", MODEL_CATALOG);
    section("perturbations", PERTURBATION_CATALOG);
    section("signals", SIGNAL_CATALOG);
    section("references", REFERENCE_CATALOG);
    println!("scenarios:");
    for (name, json) in BUNDLED_SCENARIOS {
        let desc = evuas::scenario::parse_scenario(json).map(|s| s.description).unwrap_or_default();
        println!("  {name:<28} {desc}");
    }
    for (name, path, s) in user_scenarios(dirs) {
        println!("  {name:<28} {} [{}]", s.description, path.display());
    }
}

fn run(args: StageArgs, only: Option<Stage>, dirs: &[PathBuf]) -> Result<(), ScenarioError> {
    let mut s = load_scenario(&args.scenario, dirs)?;
    let formats = (!args.format.is_empty()).then(|| {
        args.format
            .iter()
            .map(|f| match f {
                FormatArg::Csv => Format::Csv,
                FormatArg::Svg => Format::Svg,
                FormatArg::Json => Format::Json,
            })
            .collect()
    });
    let norm = args.norm.map(|n| match n {
        NormArg::Euclidean => Norm::Euclidean,
        NormArg::Inf => Norm::Inf,
    });
    s.apply(&Overrides { seed: args.seed, tol: args.tol, norm, formats });
    let out = args
        .out
        .or_else(|| s.outputs.directory.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&s.name));
    let stages = only.map(|st| vec![st]);
    let manifest = run_scenario(&s, stages.as_deref(), &out)?;
    for a in &manifest.artifacts {
        println!("{}  {}", a.sha256, out.join(&a.file).display());
    }
    println!("manifest: {}", out.join(evuas::scenario::MANIFEST_FILE).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let dirs = scenario_dirs(&cli.scenario_dirs);
    let result = match cli.command {
        Command::List => {
            list(&dirs);
            Ok(())
        }
        Command::Run(a) => run(a, None, &dirs),
        Command::Classify(a) => run(a, Some(Stage::Classify), &dirs),
        Command::Synthesize(a) => run(a, Some(Stage::Synthesize), &dirs),
        Command::Simulate(a) => run(a, Some(Stage::Simulate), &dirs),
        Command::Verify(a) => run(a, Some(Stage::Verify), &dirs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
