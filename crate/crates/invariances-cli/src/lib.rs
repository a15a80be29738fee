//! Command-line orchestration for the invariances pipeline.
//!
//! Five subcommands drive the stages end to end:
//!
//! - `train-cnn` — fit the classifier on MNIST and write its checkpoint,
//! - `train-gan` — play the adversarial filter game against the frozen
//!   classifier and write the generator/critic checkpoint,
//! - `visualize` — invert latent traversal grids into image montages,
//! - `evaluate` — filter-averaged accuracy, diversity, latent recovery,
//!   and the MDS filter map,
//! - `all` — the four stages in sequence in one run directory.
//!
//! Configuration is a flat map of dotted keys (`gan.lambda`, `viz.side`)
//! resolved from built-in defaults, then an optional `--config` JSON file,
//! then `INVARIANCES_DATA`, then flags of the same dotted names. Every run
//! writes a `manifest.json` recording the resolved configuration, artifact
//! paths relative to the run directory, headline metrics, and stage
//! timings.
//!
//! Exit codes: 0 success, 1 stage failure, 2 usage, 3 malformed
//! configuration, 4 missing checkpoint dependency, 5 unreadable dataset.

pub mod config;
pub mod error;
pub mod manifest;
pub mod scatter;
pub mod stages;

use clap::{Arg, ArgMatches, Command};

use config::{Config, KEYS};
use error::{CliError, EXIT_OK, EXIT_USAGE};
use manifest::{Manifest, RunPaths};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("train-cnn", "Train the MNIST classifier and write its checkpoint"),
    ("train-gan", "Train the filter generator and critic against a frozen classifier"),
    ("visualize", "Invert latent traversal grids into montage images"),
    ("evaluate", "Filter-averaged accuracy, diversity, latent recovery, and the MDS map"),
    ("all", "Run every stage in order inside one run directory"),
];

/// The full argument grammar. Every config key is a long flag with the
/// same dotted name on every subcommand.
pub fn command() -> Command {
    let mut cmd = Command::new("invariances")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Extract and inspect the learned invariances of a CNN classifier")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("JSON config file: one flat object keyed by the dotted names below"),
        );
        for k in KEYS {
            let mut arg = Arg::new(k.key).long(k.key).value_name("VALUE").help(k.help);
            if let Some(alias) = k.alias {
                arg = arg.visible_alias(alias);
            }
            sub = sub.arg(arg);
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Parse argv (without the program name), run one subcommand, and return
/// the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let argv = std::iter::once("invariances".to_string()).chain(args);
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            return EXIT_USAGE;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match execute(name, sub) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Resolve configuration, prepare the run directory, run the stage(s),
/// and write the manifest.
pub fn execute(name: &str, matches: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve_config(matches)?;
    let paths = RunPaths::prepare(name, &cfg)?;
    let mut manifest = Manifest::new(name, cfg.resolved().clone());
    match name {
        "train-cnn" => stages::train_cnn(&cfg, &paths, &mut manifest)?,
        "train-gan" => stages::train_gan(&cfg, &paths, &mut manifest)?,
        "visualize" => stages::visualize(&cfg, &paths, &mut manifest)?,
        "evaluate" => stages::evaluate(&cfg, &paths, &mut manifest)?,
        "all" => {
            stages::train_cnn(&cfg, &paths, &mut manifest)?;
            stages::train_gan(&cfg, &paths, &mut manifest)?;
            stages::visualize(&cfg, &paths, &mut manifest)?;
            stages::evaluate(&cfg, &paths, &mut manifest)?;
        }
        other => {
            return Err(CliError {
                code: EXIT_USAGE,
                message: format!("unknown subcommand `{other}`"),
            })
        }
    }
    let written = manifest.write(&paths)?;
    println!("manifest: {}", written.display());
    Ok(())
}

/// defaults → config file → environment → flags.
pub fn resolve_config(matches: &ArgMatches) -> Result<Config, CliError> {
    let mut cfg = Config::defaults();
    if let Some(file) = matches.get_one::<String>("config") {
        cfg.apply_file(std::path::Path::new(file))?;
    }
    cfg.apply_env();
    for k in KEYS {
        if let Some(raw) = matches.get_one::<String>(k.key) {
            cfg.set_flag(k.key, raw)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
