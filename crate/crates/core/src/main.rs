fn main() {
    std::process::exit(glae::cli::run(std::env::args_os()));
}
