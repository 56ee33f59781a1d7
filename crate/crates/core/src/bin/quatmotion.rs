fn main() {
    std::process::exit(quatmotion::cli::main_with_args(std::env::args_os()));
}
