fn main() {
    std::process::exit(bpr::cli::dispatch(std::env::args().skip(1)));
}
