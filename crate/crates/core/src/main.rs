fn main() {
    std::process::exit(mudiff::cli::run(std::env::args_os()));
}
