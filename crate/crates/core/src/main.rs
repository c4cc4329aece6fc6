fn main() {
    std::process::exit(trinode_core::cli::run_cli(std::env::args_os()));
}
