fn main() {
    std::process::exit(cfdens::cli::main_with_args(std::env::args_os()));
}
