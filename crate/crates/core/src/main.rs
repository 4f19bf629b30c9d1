fn main() {
    std::process::exit(homog_core::cli::main_with(std::env::args_os()));
}
