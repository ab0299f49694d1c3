fn main() {
    std::process::exit(hdnn::harness::cli::run_cli(std::env::args_os()));
}
