fn main() {
    std::process::exit(nijlab::cli::dispatch(std::env::args_os()));
}
