fn main() {
    std::process::exit(sympgp::cli::run(std::env::args_os()));
}
