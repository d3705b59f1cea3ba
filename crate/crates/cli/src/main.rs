fn main() {
    std::process::exit(spectralseg_cli::run_cli(std::env::args().collect()));
}
