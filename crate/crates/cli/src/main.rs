use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches};

use dico_cli::config::{read_config_text, RUN_KEYS};
use dico_cli::{dispatch, exit_code, Command, RunConfig};
use dico_core::{ModelConfig, Result};

fn cli() -> clap::Command {
    let mut app = clap::Command::new("dico")
        .about("Train, sample and profile DiCo diffusion models")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in Command::ALL {
        let mut sub = clap::Command::new(cmd.name()).about(cmd.about()).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key=value config file; flags override it"),
        );
        for &(key, default, help) in RUN_KEYS {
            sub = sub.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .help(format!("{help} [default: {default:?}]")),
            );
        }
        for &key in ModelConfig::KEYS {
            sub = sub.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .help("model key, overrides the preset"),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(name: &str, m: &ArgMatches) -> Result<RunConfig> {
    let cmd: Command = name.parse()?;
    let text = read_config_text(m.get_one::<PathBuf>("config").map(PathBuf::as_path))?;
    let flags: Vec<(String, String)> = RUN_KEYS
        .iter()
        .map(|&(k, _, _)| k)
        .chain(ModelConfig::KEYS.iter().copied())
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    RunConfig::parse(cmd, &text, &flags)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match resolve(name, sub).and_then(|cfg| dispatch(&cfg)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dico {name}: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
