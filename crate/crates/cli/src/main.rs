fn main() {
    std::process::exit(dlow_cli::run(std::env::args_os()));
}
