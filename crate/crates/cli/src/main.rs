fn main() {
    std::process::exit(strokeforge_cli::run(std::env::args_os()));
}
