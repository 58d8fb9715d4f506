fn main() {
    std::process::exit(survmil::cli::main_entry());
}
