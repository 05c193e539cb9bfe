fn main() {
    std::process::exit(deepbeat::harness::cli_dispatch(std::env::args_os()));
}
