fn main() -> std::process::ExitCode {
    wms_core::cli::main()
}
