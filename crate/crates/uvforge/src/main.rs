fn main() {
    std::process::exit(uvforge::cli::run(std::env::args_os()));
}
