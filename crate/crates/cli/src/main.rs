fn main() {
    std::process::exit(fourierformer_cli::run(std::env::args_os()));
}
