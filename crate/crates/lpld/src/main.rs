fn main() -> std::process::ExitCode {
    lpld::cli::main()
}
