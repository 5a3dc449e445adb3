use emev_core::cli::{run, THREADS_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not set {THREADS_ENV}={n}: {e}");
        }
    }
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = run(std::env::args_os(), &mut stdout) {
        eprintln!("emev: {e}");
        std::process::exit(e.exit_code());
    }
}
