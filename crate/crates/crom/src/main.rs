fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("CROM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: CROM_THREADS must be a positive integer, got `{v}`");
                std::process::exit(1);
            }
        }
    }
    std::process::exit(crom::cli::main_with_args(std::env::args_os()));
}
