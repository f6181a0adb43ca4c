fn main() {
    std::process::exit(keat::cli::run());
}
