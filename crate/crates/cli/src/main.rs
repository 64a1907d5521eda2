fn main() {
    std::process::exit(wae_cli::run(std::env::args_os()));
}
