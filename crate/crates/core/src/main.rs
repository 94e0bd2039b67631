fn main() {
    std::process::exit(sgasp::cli::run(std::env::args_os()));
}
