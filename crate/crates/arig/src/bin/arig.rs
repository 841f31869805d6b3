fn main() {
    std::process::exit(arig::cli::main_with_args(std::env::args_os()));
}
