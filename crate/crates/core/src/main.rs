use clap::Parser;
use koopsos::cli::{self, Cli};

fn main() {
    // The SDP backend calls into OpenBLAS from many rayon workers at once;
    // nested BLAS threading only adds contention.
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    std::process::exit(cli::run(cli));
}
