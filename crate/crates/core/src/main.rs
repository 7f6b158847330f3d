fn main() {
    std::process::exit(protoabstain::cli::main_with_args(std::env::args_os()));
}
