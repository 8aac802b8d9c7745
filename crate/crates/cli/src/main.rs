use clap::Parser;

fn main() {
    let cli = sgmoe_cli::Cli::parse();
    if let Err(err) = sgmoe_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(sgmoe_cli::exit_code(&err));
    }
}
