fn main() {
    std::process::exit(hinject::cli::main_entry());
}
