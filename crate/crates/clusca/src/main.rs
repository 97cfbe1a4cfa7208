fn main() {
    std::process::exit(clusca::cli::main_with_args(std::env::args_os()));
}
