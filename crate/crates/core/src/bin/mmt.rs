fn main() {
    std::process::exit(mmt::cli::run(std::env::args_os()));
}
