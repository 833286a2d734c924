fn main() -> std::process::ExitCode {
    gralora_cli::main_with_args(std::env::args_os())
}
