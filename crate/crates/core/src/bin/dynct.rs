fn main() {
    std::process::exit(dynct::cli::main_with_args(std::env::args_os()));
}
