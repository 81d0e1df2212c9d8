use clap::Parser;

fn main() {
    if let Err(e) = rq_cli::run(rq_cli::Cli::parse()) {
        eprintln!("rq: {e}");
        std::process::exit(e.exit_code());
    }
}
