fn main() {
    std::process::exit(regionedit_cli::cli::run(std::env::args_os()));
}
