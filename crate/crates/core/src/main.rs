fn main() {
    std::process::exit(fairrank::cli::run(std::env::args_os()));
}
