fn main() {
    std::process::exit(atpg::cli::run());
}
