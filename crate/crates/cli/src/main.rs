fn main() {
    std::process::exit(hanorec_cli::dispatch(std::env::args_os()));
}
