fn main() {
    let code = picard_cli::run_command(std::env::args_os());
    std::process::exit(code);
}
