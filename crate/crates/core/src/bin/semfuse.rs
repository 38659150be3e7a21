fn main() {
    std::process::exit(semfuse::cli::dispatch(std::env::args_os()));
}
