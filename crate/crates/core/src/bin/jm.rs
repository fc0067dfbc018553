fn main() {
    std::process::exit(jm_core::cli::run(std::env::args_os()));
}
