fn main() -> std::process::ExitCode {
    fbe_core::cli::main()
}
