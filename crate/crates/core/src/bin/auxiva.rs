fn main() -> std::process::ExitCode {
    online_auxiva::cli::main()
}
