fn main() {
    std::process::exit(orthotest_cli::execute(std::env::args_os()));
}
