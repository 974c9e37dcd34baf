fn main() {
    std::process::exit(sumkit::cli::run(std::env::args_os()));
}
