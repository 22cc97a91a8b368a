fn main() {
    std::process::exit(microau::cli::run_from(std::env::args_os()));
}
