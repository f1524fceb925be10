fn main() {
    std::process::exit(entalign::cli::run(std::env::args_os()));
}
