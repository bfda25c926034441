fn main() {
    std::process::exit(flowgspo::cli::run(std::env::args_os()));
}
