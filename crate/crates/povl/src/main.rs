fn main() {
    std::process::exit(povl::cli::dispatch(std::env::args_os()));
}
