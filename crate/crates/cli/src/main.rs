fn main() {
    std::process::exit(stealthpatch_cli::run_cli(std::env::args_os()));
}
