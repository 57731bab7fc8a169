fn main() {
    std::process::exit(modalkit::cli::run(std::env::args_os()));
}
