fn main() {
    std::process::exit(conflow::cli::run());
}
