fn main() {
    std::process::exit(unit_core::cli::run());
}
