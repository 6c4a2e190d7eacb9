fn main() {
    std::process::exit(lesionkit::cli::run(std::env::args_os()));
}
