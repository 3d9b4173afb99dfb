fn main() -> std::process::ExitCode {
    disel::cli::run()
}
