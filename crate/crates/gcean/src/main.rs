fn main() { std::process::exit(gcean::cli::run_from_env()); }
