fn main() {
    std::process::exit(pand::cli::parse_and_dispatch(std::env::args_os()));
}
