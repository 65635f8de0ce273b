fn main() {
    std::process::exit(dpsgd_adapt::cli::run(std::env::args_os()));
}
