fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(kernelsens::cli::LOG_ENV, "warn")).init();
    std::process::exit(kernelsens::cli::main_with_args(std::env::args_os()));
}
