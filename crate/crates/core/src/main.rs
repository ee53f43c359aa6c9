fn main() {
    std::process::exit(wildfire::cli::main());
}
