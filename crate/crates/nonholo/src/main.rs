fn main() {
    std::process::exit(nonholo::cli::main_with_args(std::env::args_os()));
}
