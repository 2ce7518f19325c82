use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use dvc_cli::config::{RawConfig, RunConfig, KEYS};
use dvc_cli::{commands, CliError, CliResult};

fn cli() -> Command {
    let mut cmd = Command::new("dvc")
        .about("Deep variational clustering: pretrain, cluster, evaluate, embed, generate, report")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_parser(value_parser!(PathBuf))
                .help("config file of dotted `key = value` lines"),
        )
        .arg(Arg::new("seed").long("seed").global(true).help("run seed"))
        .arg(Arg::new("output").long("output").global(true).help("output directory"));
    for (key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .global(true)
                .value_name("VALUE")
                .help(*help)
                .hide_short_help(true),
        );
    }
    let checkpoint = || {
        Arg::new("checkpoint")
            .long("checkpoint")
            .required(true)
            .value_parser(value_parser!(PathBuf))
    };
    cmd.subcommand(Command::new("pretrain").about("pretrain the autoencoder and save it"))
        .subcommand(
            Command::new("cluster")
                .about("initialize centroids with K-means and run joint training")
                .arg(checkpoint().help("pretrained model checkpoint"))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_parser(value_parser!(PathBuf))
                        .help("continue from a saved training state"),
                ),
        )
        .subcommand(
            Command::new("evaluate")
                .about("score a labels CSV against ground truth")
                .arg(
                    Arg::new("labels")
                        .long("labels")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                ),
        )
        .subcommand(
            Command::new("embed")
                .about("write noise-free embeddings and cluster assignments")
                .arg(checkpoint().help("training-state checkpoint")),
        )
        .subcommand(
            Command::new("generate")
                .about("decode prior samples into an image grid")
                .arg(checkpoint().help("model or training-state checkpoint"))
                .arg(
                    Arg::new("n")
                        .long("n")
                        .default_value("16")
                        .value_parser(value_parser!(usize)),
                ),
        )
        .subcommand(
            Command::new("report")
                .about("aggregate metrics of several runs into one CSV")
                .arg(
                    Arg::new("runs")
                        .long("runs")
                        .value_parser(value_parser!(PathBuf))
                        .help("directory of run directories (defaults to --output)"),
                )
                .arg(Arg::new("dest").long("dest").value_parser(value_parser!(PathBuf))),
        )
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true),
        )
}

/// File values first, then flags of the same names on top.
fn resolve(m: &ArgMatches) -> CliResult<RunConfig> {
    let mut raw = match m.get_one::<PathBuf>("config") {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for key in KEYS.iter().map(|(k, _)| *k).chain(["seed", "output"]) {
        if let Some(v) = m.get_one::<String>(key) {
            raw.set(key, v.clone());
        }
    }
    RunConfig::from_raw(&raw)
}

fn run(matches: &ArgMatches) -> CliResult<()> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if name == "report" {
        let cfg_output = sub.get_one::<String>("output").map(PathBuf::from);
        let runs = sub
            .get_one::<PathBuf>("runs")
            .cloned()
            .or(cfg_output.clone())
            .ok_or_else(|| CliError::Usage("report needs --runs or --output".into()))?;
        let dest = sub
            .get_one::<PathBuf>("dest")
            .cloned()
            .unwrap_or_else(|| runs.join(dvc_cli::artifacts::REPORT));
        let (path, rows) = commands::report(&runs, &dest)?;
        println!("{} ({rows} runs)", path.display());
        return Ok(());
    }
    let cfg = resolve(sub)?;
    match name {
        "pretrain" => {
            let ckpt = commands::pretrain(&cfg)?;
            println!("{}", ckpt.display());
        }
        "cluster" => {
            let ckpt = sub.get_one::<PathBuf>("checkpoint").expect("required");
            let resume = sub.get_one::<PathBuf>("resume");
            let summary = commands::cluster(&cfg, ckpt, resume.map(PathBuf::as_path))?;
            println!("{}", serde_json::to_string(&summary).expect("plain struct"));
        }
        "evaluate" => {
            let labels = sub.get_one::<PathBuf>("labels").expect("required");
            let report = commands::evaluate(&cfg, labels)?;
            println!("{}", serde_json::to_string(&report).expect("plain struct"));
        }
        "embed" => {
            let ckpt = sub.get_one::<PathBuf>("checkpoint").expect("required");
            println!("{}", commands::embed(&cfg, ckpt)?.display());
        }
        "generate" => {
            let ckpt = sub.get_one::<PathBuf>("checkpoint").expect("required");
            let n = *sub.get_one::<usize>("n").expect("defaulted");
            println!("{}", commands::generate(&cfg, ckpt, n)?.display());
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = match matches.subcommand().map_or(0, |(_, m)| m.get_count("verbose")) {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file_keys() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "schedule.lambda = 0.3\ncluster.k = 4\n").unwrap();
        let m = cli().get_matches_from([
            "dvc",
            "pretrain",
            "--config",
            file.to_str().unwrap(),
            "--schedule.lambda",
            "0.2",
            "--seed",
            "7",
        ]);
        let cfg = resolve(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.schedule.lambda, 0.2);
        assert_eq!(cfg.k, 4);
        assert_eq!((cfg.seed, cfg.schedule.seed), (7, 7));
    }
}
