use clap::Parser;
use graphbert_cli::cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = execute(Cli::parse()) {
        eprintln!(
            "{}",
            serde_json::json!({ "category": e.category(), "message": e.to_string() })
        );
        std::process::exit(e.exit_code());
    }
}
