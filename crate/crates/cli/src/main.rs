fn main() {
    std::process::exit(bpcstore_cli::run_command(std::env::args_os()));
}
