fn main() {
    std::process::exit(pnc_cli::run(std::env::args_os()));
}
