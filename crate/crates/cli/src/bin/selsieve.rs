fn main() {
    std::process::exit(selsieve_cli::run(std::env::args_os()));
}
