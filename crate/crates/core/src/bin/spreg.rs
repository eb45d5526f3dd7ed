fn main() {
    std::process::exit(smoothproper::cli::main());
}
