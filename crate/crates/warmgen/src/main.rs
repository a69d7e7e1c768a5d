fn main() {
    std::process::exit(warmgen::cli::run_cli(std::env::args_os()));
}
