fn main() {
    std::process::exit(sbnmt::harness::cli::run(std::env::args_os()));
}
