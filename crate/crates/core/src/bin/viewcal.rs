fn main() {
    std::process::exit(viewcal::cli::run(std::env::args_os()));
}
