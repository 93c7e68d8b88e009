use std::process::exit;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    exit(synergy_kgc::cli::run(std::env::args_os()));
}
