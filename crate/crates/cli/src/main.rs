fn main() {
    std::process::exit(assign_surrogate_cli::run_command(std::env::args_os()));
}
