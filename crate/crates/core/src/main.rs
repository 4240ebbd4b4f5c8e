fn main() {
    std::process::exit(highlight::cli::run(std::env::args_os()));
}
