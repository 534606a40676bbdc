fn main() {
    std::process::exit(nnmil::cli::run(std::env::args_os()));
}
