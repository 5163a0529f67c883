fn main() {
    randes::cli::init_logging();
    std::process::exit(randes::cli::run(std::env::args_os()));
}
