fn main() {
    std::process::exit(m2ds::cli::run(std::env::args_os()));
}
