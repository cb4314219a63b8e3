fn main() {
    std::process::exit(mogo::cli::main_with_args(std::env::args_os()));
}
