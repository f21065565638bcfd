fn main() {
    std::process::exit(labelsift::cli::cli_main(std::env::args_os()));
}
