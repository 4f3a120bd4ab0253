fn main() {
    std::process::exit(gate_core::cli::run(std::env::args_os()));
}
