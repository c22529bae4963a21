fn main() -> std::process::ExitCode {
    nmfp::cli::main()
}
