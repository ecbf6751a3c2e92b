fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DDL_LOG", "warn")).init();
    std::process::exit(ddl_core::cli::main_with_args(std::env::args()));
}
