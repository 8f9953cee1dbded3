fn main() {
    std::process::exit(delphi_aa::cli::main_entry());
}
