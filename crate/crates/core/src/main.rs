fn main() {
    std::process::exit(toxigan::cli::run());
}
