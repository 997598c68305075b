fn main() {
    std::process::exit(pllkit_cli::run(std::env::args_os()));
}
