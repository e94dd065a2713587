fn main() {
    std::process::exit(maskident::expcli::run_cli(std::env::args_os()));
}
