fn main() -> std::process::ExitCode {
    mprf::cli::main()
}
