fn main() {
    std::process::exit(owlab::cli::run_cli(std::env::args_os()));
}
