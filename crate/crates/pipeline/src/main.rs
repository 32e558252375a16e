fn main() {
    std::process::exit(orch_pipeline::cli::cli_main(std::env::args_os()));
}
