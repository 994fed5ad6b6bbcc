fn main() {
    std::process::exit(cellmil::cli::main_with_args(std::env::args_os()));
}
