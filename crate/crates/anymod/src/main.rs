fn main() {
    std::process::exit(anymod::cli::dispatch(std::env::args_os()));
}
