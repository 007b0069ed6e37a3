fn main() {
    std::process::exit(ocbf::cli::main_with_args(std::env::args_os()));
}
