fn main() {
    std::process::exit(mtmae::cli::main());
}
