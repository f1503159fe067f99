fn main() {
    std::process::exit(revrisk::cli::main_with_args(std::env::args_os()));
}
