fn main() -> std::process::ExitCode {
    actionflow::cli::main()
}
