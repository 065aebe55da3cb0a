fn main() {
    std::process::exit(sifm::cli::run(std::env::args_os()));
}
