fn main() {
    std::process::exit(avse_core::cli::main_with(std::env::args_os()));
}
