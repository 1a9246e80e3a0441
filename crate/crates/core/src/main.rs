fn main() {
    std::process::exit(robustproj::cli::run(std::env::args_os()));
}
