fn main() {
    std::process::exit(assimilate::harness::cli::cli_main(std::env::args_os()));
}
