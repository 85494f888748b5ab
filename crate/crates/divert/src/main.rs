fn main() {
    std::process::exit(divert::cli::run(std::env::args()));
}
