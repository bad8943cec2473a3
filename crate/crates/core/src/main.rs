fn main() {
    std::process::exit(vsdering::cli::run(std::env::args_os()));
}
