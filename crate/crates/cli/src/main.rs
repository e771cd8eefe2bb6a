fn main() {
    std::process::exit(airlift_cli::dispatch(std::env::args_os()));
}
