fn main() {
    std::process::exit(gaston::cli::run(std::env::args_os()));
}
