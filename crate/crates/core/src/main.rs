fn main() -> std::process::ExitCode {
    dice_sim::cli::main()
}
