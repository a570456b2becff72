use clap::Parser;
use swan_vox_cli::{run, Cli, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", CliError::Parse(e.kind().to_string()).record("parse"));
            }
            std::process::exit(code);
        }
    };
    let name = cli.command_name();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        eprintln!("{}", e.record(name));
        std::process::exit(e.exit_code());
    }
}
