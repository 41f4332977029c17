fn main() {
    std::process::exit(qmw_cli::run(std::env::args_os()));
}
