fn main() {
    std::process::exit(simdis_lab::cli::run_command(std::env::args_os()));
}
