fn main() {
    std::process::exit(fppformer::cli::run(std::env::args_os()));
}
