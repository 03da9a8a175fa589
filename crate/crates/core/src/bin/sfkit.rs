fn main() {
    std::process::exit(sfkit::cli::run(std::env::args_os()));
}
