fn main() -> std::process::ExitCode {
    mvqa::cli::main()
}
