fn main() {
    std::process::exit(c2e::cli::run(std::env::args_os()));
}
