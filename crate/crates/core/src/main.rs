fn main() {
    std::process::exit(worldmodel::cli::main_with(std::env::args_os()));
}
