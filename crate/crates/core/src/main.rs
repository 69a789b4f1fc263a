fn main() {
    std::process::exit(qpe_lab::cli::main_with_args(std::env::args_os()));
}
