fn main() {
    std::process::exit(shaptst::cli::run(std::env::args_os()));
}
