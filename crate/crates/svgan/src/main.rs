use clap::Parser;

fn main() {
    let cli = svgan::cli::Cli::parse();
    if let Err(e) = svgan::cli::run(cli) {
        svgan::log::flush_stdout();
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
