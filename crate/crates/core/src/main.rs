fn main() {
    std::process::exit(lba::cli::run(std::env::args_os()));
}
