fn main() {
    std::process::exit(utts_cli::run(std::env::args_os()));
}
