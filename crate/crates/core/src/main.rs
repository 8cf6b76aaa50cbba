fn main() {
    std::process::exit(funlasso::cli::run(std::env::args_os()));
}
