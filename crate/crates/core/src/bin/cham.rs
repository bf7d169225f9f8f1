fn main() {
    std::process::exit(cham::cli::run(std::env::args_os()));
}
