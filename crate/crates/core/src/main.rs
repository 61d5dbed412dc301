fn main() {
    std::process::exit(segclr::cli::run(std::env::args_os()));
}
