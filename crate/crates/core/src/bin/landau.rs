fn main() {
    std::process::exit(landau::cli::main_with(std::env::args_os()));
}
