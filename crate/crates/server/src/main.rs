fn main() {
    std::process::exit(lelsd::cli::run(std::env::args_os()));
}
