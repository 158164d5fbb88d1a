fn main() {
    std::process::exit(probin::cli::run_cli(std::env::args()));
}
