use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = projpred::cli::Args::parse();
    std::process::exit(projpred::cli::run(args));
}
