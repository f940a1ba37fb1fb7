fn main() {
    std::process::exit(personvlad::cli::main_with_args(std::env::args_os()));
}
