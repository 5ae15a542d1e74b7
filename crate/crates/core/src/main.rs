fn main() {
    std::process::exit(wordalign::cli::run(std::env::args_os()));
}
