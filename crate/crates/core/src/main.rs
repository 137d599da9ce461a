fn main() {
    std::process::exit(gazeauth::cli::main_with_args(std::env::args_os()));
}
