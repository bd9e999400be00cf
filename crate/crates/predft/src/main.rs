fn main() {
    std::process::exit(predft::cli::dispatch(std::env::args()));
}
