fn main() {
    std::process::exit(vfb::cli::run(std::env::args_os()));
}
