use clap::Parser;

fn main() {
    let cli = dtw_shield::cli::Cli::parse();
    if let Err(e) = dtw_shield::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
