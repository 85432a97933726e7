fn main() -> std::process::ExitCode {
    wm_cli::run(std::env::args_os())
}
