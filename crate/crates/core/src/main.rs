fn main() {
    std::process::exit(lqmfg::cli::run(std::env::args_os()));
}
