fn main() {
    std::process::exit(octopus_cli::execute(std::env::args_os()));
}
