fn main() {
    std::process::exit(sgdfuse::cli::dispatch(std::env::args_os()));
}
