use metric_forge_core::cli;
use metric_forge_core::config::SEED_ENV;

fn main() {
    let env_seed = std::env::var(SEED_ENV).ok();
    let code = cli::dispatch(std::env::args_os(), env_seed.as_deref(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
