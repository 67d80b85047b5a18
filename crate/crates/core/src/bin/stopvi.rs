fn main() {
    std::process::exit(stopvi::cli::main_with_args(std::env::args_os()));
}
