fn main() {
    std::process::exit(clinembed::cli::main_with_args(std::env::args_os()));
}
