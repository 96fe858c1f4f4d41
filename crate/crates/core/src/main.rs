fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = imucoco::cli::init_workers() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
    std::process::exit(imucoco::cli::dispatch(std::env::args_os()));
}
