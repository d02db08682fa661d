fn main() -> std::process::ExitCode {
    unotb::cli::main()
}
