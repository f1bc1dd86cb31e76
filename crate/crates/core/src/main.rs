fn main() {
    std::process::exit(kpnet::cli::main_with_args(std::env::args_os()));
}
