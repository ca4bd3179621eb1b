fn main() {
    std::process::exit(avic_cli::run(std::env::args_os()));
}
