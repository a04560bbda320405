fn main() -> std::process::ExitCode {
    tactile_guidance::cli::main_with_args(std::env::args_os())
}
