fn main() -> std::process::ExitCode {
    gpner::cli::main()
}
