fn main() {
    std::process::exit(mdsrn_cli::run_command(std::env::args_os()));
}
