fn main() {
    std::process::exit(idlike::cli::cli(std::env::args().skip(1)));
}
