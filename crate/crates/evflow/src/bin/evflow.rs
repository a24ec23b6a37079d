fn main() {
    std::process::exit(evflow::cli::run(std::env::args_os()));
}
