fn main() {
    std::process::exit(ommbrl_cli::main_with_args(std::env::args_os()));
}
