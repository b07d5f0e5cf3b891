fn main() {
    std::process::exit(qsum::cli::run(std::env::args_os()));
}
