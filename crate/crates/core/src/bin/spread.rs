fn main() {
    std::process::exit(spread_core::cli::run(std::env::args_os()));
}
