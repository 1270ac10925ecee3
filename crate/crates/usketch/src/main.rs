fn main() {
    std::process::exit(usketch::cli::dispatch(std::env::args()));
}
