fn main() {
    std::process::exit(quantcal::cli::main_with_args(std::env::args_os()));
}
