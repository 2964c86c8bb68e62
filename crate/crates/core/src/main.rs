fn main() {
    std::process::exit(meshweave::cli::main());
}
