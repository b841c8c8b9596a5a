fn main() {
    std::process::exit(dmn_core::cli::main_with_args(std::env::args()));
}
