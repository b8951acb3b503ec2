fn main() {
    std::process::exit(dbsa_cli::run(std::env::args_os()));
}
