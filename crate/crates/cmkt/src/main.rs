fn main() {
    std::process::exit(cmkt::cli::run());
}
