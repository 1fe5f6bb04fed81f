fn main() -> std::process::ExitCode {
    modaux::cli::main_with_args(std::env::args_os())
}
