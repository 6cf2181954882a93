fn main() {
    std::process::exit(mikv::cli::run(std::env::args_os()));
}
