fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(vqmark::cli::dispatch(std::env::args_os()));
}
