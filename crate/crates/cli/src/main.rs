fn main() {
    std::process::exit(faar_cli::dispatch(std::env::args_os()));
}
