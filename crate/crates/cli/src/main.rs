fn main() {
    std::process::exit(dlr_cli::run(std::env::args_os()));
}
