fn main() {
    std::process::exit(organoseg::cli::main_with_args(std::env::args_os()));
}
