fn main() {
    std::process::exit(deeppbm::cli::run(std::env::args_os()));
}
