fn main() {
    std::process::exit(allmem::cli::run(std::env::args_os()));
}
