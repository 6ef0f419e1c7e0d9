fn main() {
    std::process::exit(mvtrack::cli::run(std::env::args_os()));
}
