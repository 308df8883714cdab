use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = aoi_nest_cli::Cli::parse();
    let result = aoi_nest_cli::init_threads().and_then(|_| aoi_nest_cli::run(cli));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
