fn main() {
    std::process::exit(ccir_cli::run(std::env::args_os()));
}
