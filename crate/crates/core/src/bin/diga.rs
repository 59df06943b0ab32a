fn main() {
    std::process::exit(diga::cli::run(std::env::args_os()));
}
