fn main() {
    std::process::exit(openset_score::cli::run(std::env::args_os()));
}
