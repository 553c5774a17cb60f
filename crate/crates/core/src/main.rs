fn main() {
    std::process::exit(camodiff::cli::run(std::env::args_os()));
}
