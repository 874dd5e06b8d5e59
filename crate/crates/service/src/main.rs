fn main() -> std::process::ExitCode {
    ladder_service::cli::main()
}
