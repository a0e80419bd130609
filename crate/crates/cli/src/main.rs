fn main() -> std::process::ExitCode {
    geomamba_cli::main_with_args(std::env::args_os())
}
