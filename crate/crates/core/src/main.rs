fn main() {
    std::process::exit(isunet::cli::main());
}
