fn main() {
    std::process::exit(metacal::cli::run());
}
