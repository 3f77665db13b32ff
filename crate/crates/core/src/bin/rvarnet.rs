fn main() {
    std::process::exit(rvarnet::cli::run(std::env::args_os()));
}
