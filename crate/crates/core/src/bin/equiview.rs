fn main() {
    std::process::exit(equiview::cli::run(std::env::args_os()));
}
