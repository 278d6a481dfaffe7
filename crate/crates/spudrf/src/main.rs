fn main() {
    std::process::exit(spudrf::cli::run(std::env::args_os()));
}
