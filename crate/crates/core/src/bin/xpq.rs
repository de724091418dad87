fn main() {
    std::process::exit(xpq_core::cli::main_with_args(std::env::args_os()));
}
