fn main() {
    std::process::exit(promptlab::cli::main());
}
