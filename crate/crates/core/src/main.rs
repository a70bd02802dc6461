fn main() {
    std::process::exit(sepformer::cli::main_with_args(std::env::args_os()));
}
