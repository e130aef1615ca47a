fn main() {
    std::process::exit(vgi::cli::main_with_args(std::env::args_os()));
}
