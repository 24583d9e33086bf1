fn main() {
    std::process::exit(dsn_sim::cli::main_from_env());
}
