use clap::Parser;

fn main() {
    let cli = ovt_cli::Cli::parse();
    if let Err(e) = ovt_cli::configure_threads() {
        eprintln!("error: {e:#}");
        std::process::exit(ovt_cli::EXIT_RUNTIME);
    }
    if let Err(f) = ovt_cli::run(cli) {
        eprintln!("error: {:#}", f.error);
        std::process::exit(f.code);
    }
}
