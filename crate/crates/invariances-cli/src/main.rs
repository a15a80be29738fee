fn main() {
    std::process::exit(invariances_cli::run(std::env::args().skip(1)));
}
